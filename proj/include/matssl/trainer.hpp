// Training loops (source classification pretrain, contrastive adaptation,
// segmentation fine-tune), the metrics CSV, and checkpoint-backed evaluation.
#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "matssl/checkpoint.hpp"
#include "matssl/config.hpp"
#include "matssl/dataset.hpp"

namespace matssl {

struct MetricsRow {
    int epoch = 0;
    std::string phase;
    std::optional<double> loss;
    std::optional<double> lr;
    std::optional<double> miou;
    std::vector<double> gates;
};

// Header: epoch,phase,loss,lr,miou,gate_0..gate_{S-1}; one row per epoch;
// missing fields stay empty. Numbers are shortest round-trip, so identical
// runs emit identical bytes.
std::string format_metrics_csv(const std::vector<MetricsRow>& rows, int gate_columns);
void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows,
                       int gate_columns);
std::vector<MetricsRow> load_metrics_csv(const std::string& path);

// Loads images (and sibling "mask_*" files when present) from a directory,
// caching by id.
class ImageStore {
public:
    explicit ImageStore(std::string dir, std::optional<int> num_classes = std::nullopt);
    const ImageRecord& get(const std::string& id) const;
    static std::string mask_id(const std::string& image_id);

private:
    std::string dir_;
    std::optional<int> num_classes_;
    mutable std::map<std::string, ImageRecord> cache_;
};

struct SslRunResult {
    std::string encoder_checkpoint;  // <output_dir>/ssl_final.ckpt
    std::string head_checkpoint;     // <output_dir>/ssl_head_final.ckpt
    std::string metrics_csv;
    std::vector<MetricsRow> rows;
};

// Contrastive adaptation over the manifest's unlabeled entries (train entries
// when none are tagged unlabeled). SGD + per-epoch cosine schedule by default,
// last incomplete batch dropped, per-epoch CSV row with loss/lr/gates.
SslRunResult run_ssl(const RunConfig& cfg);

// Keeps the first maximum of a validation curve; offer() says whether the
// snapshot at this epoch should replace the kept one.
struct BestTracker {
    int best_epoch = -1;
    double best_value = 0.0;
    bool offer(int epoch, double value) {
        if (best_epoch < 0 || value > best_value) {
            best_epoch = epoch;
            best_value = value;
            return true;
        }
        return false;
    }
};

struct FinetuneRunResult {
    std::string model_checkpoint;  // <output_dir>/finetune_best.ckpt
    std::string metrics_csv;
    std::vector<MetricsRow> rows;
    int best_epoch = -1;
    double best_val_miou = 0.0;
    double test_miou = 0.0;
    bool val_is_test = false;  // no val split existed; test doubled as validation
};

// End-to-end Dice training with Adam; evaluates the validation split every
// eval_every epochs and keeps the best checkpoint; reports on the test split.
FinetuneRunResult run_finetune(const RunConfig& cfg);

struct SourcePretrainResult {
    std::string encoder_checkpoint;  // <output_dir>/source_encoder.ckpt
    std::string metrics_csv;
    std::vector<MetricsRow> rows;
    double final_train_accuracy = 0.0;
};

// Supervised stand-in for large-corpus pretraining: dominant-phase patch
// classification with a linear head on the last stage's GAP vector. The head
// is dropped from the returned checkpoint.
SourcePretrainResult pretrain_source(const RunConfig& cfg);

struct EvalImageResult {
    std::string image_id;
    std::vector<double> per_class_iou;
    double miou = 0.0;
};

struct EvalReport {
    std::vector<EvalImageResult> per_image;
    std::vector<double> pooled_per_class;
    double pooled_miou = 0.0;
    double mean_per_image_miou = 0.0;
    int num_classes = 0;
};

// Evaluates a finetuned checkpoint over one split of the manifest; optionally
// writes predicted class-index masks ("pred_<id>.pgm") into out_dir.
EvalReport evaluate_checkpoint(const RunConfig& cfg, const std::string& checkpoint_path,
                               Split split, const std::string& pred_out_dir = {});

// Dominant mask class (ties break toward the lower index).
int dominant_class(const std::vector<std::uint8_t>& mask, int num_classes);

}  // namespace matssl
