#include "matssl/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "matssl/augment.hpp"
#include "matssl/segmenter.hpp"
#include "matssl/sslhead.hpp"

namespace matssl {

namespace {

std::string opt_field(const std::optional<double>& v) {
    return v ? format_double(*v) : std::string();
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            fields.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    fields.push_back(cur);
    return fields;
}

void ensure_dir(const std::string& dir) {
    if (!dir.empty()) std::filesystem::create_directories(dir);
}

Tensor stack_images(const std::vector<Tensor>& items) {
    if (items.empty()) throw ValueError("stack_images: empty batch");
    const Shape& s = items[0].shape();
    Tensor out = Tensor::zeros({static_cast<std::int64_t>(items.size()), s[0], s[1], s[2]});
    const std::int64_t item = s[0] * s[1] * s[2];
    float* o = out.data().data();
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (items[i].shape() != s) throw ShapeError("stack_images: inconsistent item shapes");
        std::copy(items[i].data().begin(), items[i].data().end(),
                  o + static_cast<std::int64_t>(i) * item);
    }
    return out;
}

double scheduled_lr(const TrainConfig& tc, int epoch, std::int64_t step, std::int64_t total_steps) {
    if (tc.schedule == ScheduleKind::kConstant) return tc.base_lr();
    if (tc.granularity == ScheduleGranularity::kEpoch) {
        return cosine_lr(epoch, std::max(tc.epochs - 1, 0), tc.base_lr(), tc.lr_min);
    }
    return cosine_lr(step, std::max<std::int64_t>(total_steps - 1, 0), tc.base_lr(), tc.lr_min);
}

// Confusion-count accumulator for pooled mIoU over many batches.
struct IouAccumulator {
    std::vector<std::int64_t> inter, in_pred, in_truth;

    explicit IouAccumulator(int num_classes)
        : inter(static_cast<std::size_t>(num_classes), 0),
          in_pred(static_cast<std::size_t>(num_classes), 0),
          in_truth(static_cast<std::size_t>(num_classes), 0) {}

    void add(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth) {
        for (std::size_t i = 0; i < pred.size(); ++i) {
            ++in_pred[pred[i]];
            ++in_truth[truth[i]];
            if (pred[i] == truth[i]) ++inter[pred[i]];
        }
    }

    IouResult result(AbsentClassRule rule) const {
        IouResult res;
        const int num_classes = static_cast<int>(inter.size());
        res.per_class.assign(inter.size(), std::numeric_limits<double>::quiet_NaN());
        res.present.assign(inter.size(), false);
        double total = 0.0;
        int counted = 0;
        for (int c = 0; c < num_classes; ++c) {
            const auto cz = static_cast<std::size_t>(c);
            const std::int64_t uni = in_pred[cz] + in_truth[cz] - inter[cz];
            if (uni > 0) {
                res.present[cz] = true;
                res.per_class[cz] = static_cast<double>(inter[cz]) / static_cast<double>(uni);
                total += res.per_class[cz];
                ++counted;
            } else if (rule == AbsentClassRule::kScoreOne) {
                res.per_class[cz] = 1.0;
                total += 1.0;
                ++counted;
            } else if (rule == AbsentClassRule::kScoreZero) {
                res.per_class[cz] = 0.0;
                ++counted;
            }
        }
        res.mean = counted > 0 ? total / counted : 0.0;
        return res;
    }
};

void init_encoder_weights(Encoder& encoder, const std::string& encoder_init, std::uint64_t seed) {
    if (encoder_init.empty() || encoder_init == "random") {
        encoder.init_random(seed);
    } else {
        apply_checkpoint(load_checkpoint(encoder_init), encoder.params());
    }
}

struct EpochBatches {
    std::vector<std::size_t> order;
    std::size_t batch_size = 0;
    std::size_t batch_count = 0;
};

EpochBatches plan_epoch(std::size_t n, int requested_batch, std::uint64_t seed, int epoch,
                        bool drop_last) {
    EpochBatches plan;
    plan.order.resize(n);
    std::iota(plan.order.begin(), plan.order.end(), std::size_t{0});
    Rng rng = Rng::stream(seed, /*stream_id=*/0x0e50f1eULL, static_cast<std::uint64_t>(epoch));
    rng.shuffle(plan.order);
    plan.batch_size = std::min<std::size_t>(static_cast<std::size_t>(requested_batch), n);
    plan.batch_count = drop_last ? n / plan.batch_size
                                 : (n + plan.batch_size - 1) / plan.batch_size;
    return plan;
}

std::array<std::uint64_t, 4> run_rng_state(std::uint64_t seed, int epochs) {
    return Rng::stream(seed, 0x57a7eULL, static_cast<std::uint64_t>(epochs)).state();
}

}  // namespace

std::string format_metrics_csv(const std::vector<MetricsRow>& rows, int gate_columns) {
    std::ostringstream os;
    os << "epoch,phase,loss,lr,miou";
    for (int g = 0; g < gate_columns; ++g) os << ",gate_" << g;
    os << "\n";
    for (const auto& row : rows) {
        os << row.epoch << ',' << row.phase << ',' << opt_field(row.loss) << ','
           << opt_field(row.lr) << ',' << opt_field(row.miou);
        for (int g = 0; g < gate_columns; ++g) {
            os << ',';
            if (g < static_cast<int>(row.gates.size())) {
                os << format_double(row.gates[static_cast<std::size_t>(g)]);
            }
        }
        os << "\n";
    }
    return os.str();
}

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows,
                       int gate_columns) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ParseError("cannot open '" + path + "' for writing");
    f << format_metrics_csv(rows, gate_columns);
    if (!f) throw ParseError("write failed on '" + path + "'");
}

std::vector<MetricsRow> load_metrics_csv(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ParseError("cannot open '" + path + "'");
    std::string line;
    if (!std::getline(f, line)) throw ParseError(path + ":1: empty metrics file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto header = split_csv_line(line);
    if (header.size() < 5 || header[0] != "epoch" || header[1] != "phase" || header[2] != "loss" ||
        header[3] != "lr" || header[4] != "miou") {
        throw ParseError(path + ":1: expected header epoch,phase,loss,lr,miou[,gate_*]");
    }
    std::vector<MetricsRow> rows;
    int lineno = 1;
    while (std::getline(f, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto fields = split_csv_line(line);
        if (fields.size() != header.size()) {
            throw ParseError(path + ":" + std::to_string(lineno) + ": expected " +
                             std::to_string(header.size()) + " fields, got " +
                             std::to_string(fields.size()));
        }
        MetricsRow row;
        try {
            row.epoch = std::stoi(fields[0]);
            row.phase = fields[1];
            if (!fields[2].empty()) row.loss = std::stod(fields[2]);
            if (!fields[3].empty()) row.lr = std::stod(fields[3]);
            if (!fields[4].empty()) row.miou = std::stod(fields[4]);
            for (std::size_t g = 5; g < fields.size(); ++g) {
                if (!fields[g].empty()) row.gates.push_back(std::stod(fields[g]));
            }
        } catch (const std::exception&) {
            throw ParseError(path + ":" + std::to_string(lineno) + ": non-numeric field");
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

ImageStore::ImageStore(std::string dir, std::optional<int> num_classes)
    : dir_(std::move(dir)), num_classes_(num_classes) {}

std::string ImageStore::mask_id(const std::string& image_id) {
    if (image_id.rfind("img", 0) == 0) return "mask" + image_id.substr(3);
    return image_id + "_mask";
}

const ImageRecord& ImageStore::get(const std::string& id) const {
    auto it = cache_.find(id);
    if (it != cache_.end()) return it->second;
    const std::string pgm = dir_ + "/" + id + ".pgm";
    const std::string ppm = dir_ + "/" + id + ".ppm";
    ImageRecord img;
    if (std::filesystem::exists(pgm)) {
        img = load_image(pgm);
    } else if (std::filesystem::exists(ppm)) {
        img = load_image(ppm);
    } else {
        throw ParseError("image '" + id + "' not found under '" + dir_ + "'");
    }
    img.id = id;
    const std::string mask_path = dir_ + "/" + mask_id(id) + ".pgm";
    if (std::filesystem::exists(mask_path)) {
        img.mask = load_mask(mask_path, img.width, img.height);
        img.num_classes = num_classes_;
        img.validate();
    }
    return cache_.emplace(id, std::move(img)).first->second;
}

int dominant_class(const std::vector<std::uint8_t>& mask, int num_classes) {
    std::vector<std::int64_t> counts(static_cast<std::size_t>(num_classes), 0);
    for (auto v : mask) {
        if (v >= num_classes) throw ValueError("dominant_class: mask value exceeds num_classes");
        ++counts[v];
    }
    return static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
}

SslRunResult run_ssl(const RunConfig& cfg_in) {
    RunConfig cfg = cfg_in;
    cfg.train.phase = Phase::kSsl;
    cfg.validate();
    const TrainConfig& tc = cfg.train;

    PatchDataset manifest = load_manifest(cfg.data.manifest);
    std::vector<PatchEntry> entries = manifest.with_split(Split::kUnlabeled);
    if (entries.empty()) entries = manifest.with_split(Split::kTrain);
    if (entries.empty()) throw ValueError("ssl: manifest has no unlabeled or train entries");

    ensure_dir(cfg.data.output_dir);
    write_run_config(cfg.data.output_dir + "/resolved_ssl.toml", cfg);

    ImageStore store(cfg.data.image_dir);
    AugmentConfig aug = cfg.augment;
    if (aug.view_size == 0) aug.view_size = entries.front().patch_size;
    const std::int64_t div = std::int64_t{1} << cfg.encoder.stage_count;
    if (aug.view_size % div != 0) {
        throw ConfigError("ssl: view size " + std::to_string(aug.view_size) +
                          " not divisible by 2^" + std::to_string(cfg.encoder.stage_count));
    }

    Encoder encoder(cfg.encoder);
    init_encoder_weights(encoder, cfg.data.encoder_init, tc.seed);
    FusionHead head(cfg.encoder, cfg.fusion);
    head.init_random(splitmix64(tc.seed ^ 0x55adULL));
    std::vector<NamedParam> params = ParamStore::merge({&encoder.params(), &head.params()});

    SgdState sgd_state;
    AdamState adam_state;
    const std::size_t n = entries.size();
    const std::size_t steps_per_epoch =
        n / std::min<std::size_t>(static_cast<std::size_t>(tc.batch_size), n);
    const std::int64_t total_steps = static_cast<std::int64_t>(steps_per_epoch) * tc.epochs;

    std::vector<MetricsRow> rows;
    std::int64_t global_step = 0;
    for (int epoch = 0; epoch < tc.epochs; ++epoch) {
        const EpochBatches plan = plan_epoch(n, tc.batch_size, tc.seed, epoch, /*drop_last=*/true);
        if (plan.batch_count == 0) throw ValueError("ssl: batch size exceeds dataset size");
        double epoch_loss = 0.0;
        double epoch_lr = scheduled_lr(tc, epoch, global_step, total_steps);
        for (std::size_t b = 0; b < plan.batch_count; ++b) {
            const double lr = scheduled_lr(tc, epoch, global_step, total_steps);
            epoch_lr = lr;
            std::vector<ViewPair> pairs;
            pairs.reserve(plan.batch_size);
            for (std::size_t s = 0; s < plan.batch_size; ++s) {
                const std::size_t pos = b * plan.batch_size + s;
                const PatchEntry& e = entries[plan.order[pos]];
                const ImageRecord& img = store.get(e.image_id);
                const ImageRecord patch = extract_patch(img, e.x, e.y, e.patch_size);
                Rng rng = Rng::stream(splitmix64(tc.seed) ^ 0xa96ULL,
                                      static_cast<std::uint64_t>(epoch), pos);
                pairs.push_back(make_view_pair(patch, aug, rng));
            }
            const Tensor views = stack_view_pairs(pairs);
            Tape tape;
            const Tensor loss = ssl_forward(tape, views, encoder, head, tc.temperature);
            const float loss_v = loss.value();
            if (!std::isfinite(loss_v)) {
                throw TrainAbortError("non-finite ssl loss " + std::to_string(loss_v) +
                                      " at epoch " + std::to_string(epoch) + ", batch " +
                                      std::to_string(b));
            }
            for (auto& p : params) p.tensor.zero_grad();
            tape.backward(loss);
            if (tc.optimizer == OptimizerKind::kSgd) {
                sgd_step(params, sgd_state, tc.sgd, lr);
            } else {
                adam_step(params, adam_state, tc.adam, lr);
            }
            epoch_loss += loss_v;
            ++global_step;
        }
        MetricsRow row;
        row.epoch = epoch;
        row.phase = "ssl";
        row.loss = epoch_loss / static_cast<double>(plan.batch_count);
        row.lr = epoch_lr;
        for (float g : head.gate_values()) row.gates.push_back(g);
        rows.push_back(std::move(row));
    }

    SslRunResult result;
    result.rows = rows;
    result.metrics_csv = cfg.data.output_dir + "/metrics_ssl.csv";
    write_metrics_csv(result.metrics_csv, rows, static_cast<int>(head.tap_stages().size()));

    const std::string snapshot = format_run_config(cfg);
    Checkpoint enc_ckpt = make_checkpoint(encoder.params().entries(),
                                          static_cast<std::uint32_t>(tc.epochs),
                                          run_rng_state(tc.seed, tc.epochs), snapshot);
    result.encoder_checkpoint = cfg.data.output_dir + "/ssl_final.ckpt";
    save_checkpoint(result.encoder_checkpoint, enc_ckpt);
    Checkpoint head_ckpt = make_checkpoint(head.params().entries(),
                                           static_cast<std::uint32_t>(tc.epochs),
                                           run_rng_state(tc.seed, tc.epochs), snapshot);
    result.head_checkpoint = cfg.data.output_dir + "/ssl_head_final.ckpt";
    save_checkpoint(result.head_checkpoint, head_ckpt);
    return result;
}

namespace {

LabeledBatch assemble_labeled_batch(const std::vector<PatchEntry>& entries,
                                    const std::vector<std::size_t>& order, std::size_t begin,
                                    std::size_t end, const ImageStore& store,
                                    const AugmentConfig& aug, std::uint64_t seed, int epoch,
                                    bool train_mode) {
    std::vector<Tensor> images;
    std::vector<std::uint8_t> labels;
    images.reserve(end - begin);
    for (std::size_t pos = begin; pos < end; ++pos) {
        const PatchEntry& e = entries[order[pos]];
        const ImageRecord& img = store.get(e.image_id);
        if (!img.has_mask()) {
            throw ValueError("finetune: image '" + e.image_id + "' has no mask");
        }
        const ImageRecord patch = extract_patch(img, e.x, e.y, e.patch_size);
        Rng rng = Rng::stream(splitmix64(seed) ^ 0xf11bULL, static_cast<std::uint64_t>(epoch), pos);
        const LabeledSample sample = finetune_augment(patch, aug, rng, /*apply_flips=*/train_mode);
        images.push_back(sample.image);
        labels.insert(labels.end(), sample.mask.begin(), sample.mask.end());
    }
    return LabeledBatch{stack_images(images), std::move(labels)};
}

// Pooled-per-image mIoU of one split; convention decides whether image pools
// are averaged or merged into one global pool.
double evaluate_split(const SegModel& model, const std::vector<PatchEntry>& entries,
                      const ImageStore& store, const AugmentConfig& aug, int num_classes,
                      const MetaConfig& meta, int batch_size) {
    if (entries.empty()) return 0.0;
    std::map<std::string, IouAccumulator> per_image;
    IouAccumulator pooled(num_classes);
    std::vector<std::size_t> order(entries.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t begin = 0; begin < entries.size();
         begin += static_cast<std::size_t>(batch_size)) {
        const std::size_t end =
            std::min(entries.size(), begin + static_cast<std::size_t>(batch_size));
        LabeledBatch batch = assemble_labeled_batch(entries, order, begin, end, store, aug, 0, 0,
                                                    /*train_mode=*/false);
        Tape tape(/*grad_enabled=*/false);
        const PredBatch pred = model.forward(tape, batch.images);
        const std::vector<std::uint8_t> pred_classes = argmax_classes(pred.logits);
        const std::int64_t plane = pred.logits.dim(2) * pred.logits.dim(3);
        for (std::size_t i = begin; i < end; ++i) {
            const auto off = static_cast<std::int64_t>(i - begin) * plane;
            std::span<const std::uint8_t> p(pred_classes.data() + off,
                                            static_cast<std::size_t>(plane));
            std::span<const std::uint8_t> t(batch.labels.data() + off,
                                            static_cast<std::size_t>(plane));
            pooled.add(p, t);
            auto [it, inserted] =
                per_image.try_emplace(entries[order[i]].image_id, num_classes);
            it->second.add(p, t);
        }
    }
    if (meta.miou_convention == MiouConvention::kPooled) {
        return pooled.result(meta.miou_absent_rule).mean;
    }
    double total = 0.0;
    for (const auto& [id, acc] : per_image) total += acc.result(meta.miou_absent_rule).mean;
    return total / static_cast<double>(per_image.size());
}

}  // namespace

FinetuneRunResult run_finetune(const RunConfig& cfg_in) {
    RunConfig cfg = cfg_in;
    cfg.train.phase = Phase::kFinetune;
    cfg.validate();
    const TrainConfig& tc = cfg.train;

    PatchDataset manifest = load_manifest(cfg.data.manifest);
    const std::vector<PatchEntry> train_entries = manifest.with_split(Split::kTrain);
    std::vector<PatchEntry> val_entries = manifest.with_split(Split::kVal);
    std::vector<PatchEntry> test_entries = manifest.with_split(Split::kTest);
    if (train_entries.empty()) throw ValueError("finetune: manifest has no train entries");
    FinetuneRunResult result;
    if (val_entries.empty()) {
        val_entries = test_entries;
        result.val_is_test = true;
    }
    if (val_entries.empty()) throw ValueError("finetune: manifest has no val or test entries");
    if (test_entries.empty()) test_entries = val_entries;

    ensure_dir(cfg.data.output_dir);
    write_run_config(cfg.data.output_dir + "/resolved_finetune.toml", cfg);

    ImageStore store(cfg.data.image_dir, cfg.data.num_classes);
    SegModel model(cfg.encoder, cfg.decoder);
    model.init_random(tc.seed);
    init_encoder_weights(model.encoder, cfg.data.encoder_init, tc.seed);
    if (tc.freeze_encoder) {
        for (auto& p : model.encoder.params().entries()) p.tensor.set_requires_grad(false);
    }
    std::vector<NamedParam> params = model.all_params();

    AdamState adam_state;
    SgdState sgd_state;
    const std::size_t n = train_entries.size();
    const std::size_t eff_batch = std::min<std::size_t>(static_cast<std::size_t>(tc.batch_size), n);
    const std::size_t steps_per_epoch = (n + eff_batch - 1) / eff_batch;
    const std::int64_t total_steps = static_cast<std::int64_t>(steps_per_epoch) * tc.epochs;

    std::vector<MetricsRow> rows;
    Checkpoint best;
    BestTracker tracker;
    std::int64_t global_step = 0;
    for (int epoch = 0; epoch < tc.epochs; ++epoch) {
        const EpochBatches plan = plan_epoch(n, tc.batch_size, tc.seed, epoch, /*drop_last=*/false);
        double epoch_loss = 0.0;
        double epoch_lr = scheduled_lr(tc, epoch, global_step, total_steps);
        for (std::size_t b = 0; b < plan.batch_count; ++b) {
            const double lr = scheduled_lr(tc, epoch, global_step, total_steps);
            epoch_lr = lr;
            const std::size_t begin = b * plan.batch_size;
            const std::size_t end = std::min(n, begin + plan.batch_size);
            LabeledBatch batch = assemble_labeled_batch(train_entries, plan.order, begin, end,
                                                        store, cfg.augment, tc.seed, epoch,
                                                        /*train_mode=*/true);
            Tape tape;
            const PredBatch pred = model.forward(tape, batch.images);
            const Tensor loss = soft_dice_loss(tape, pred.probabilities, batch.labels);
            const float loss_v = loss.value();
            if (!std::isfinite(loss_v)) {
                throw TrainAbortError("non-finite dice loss " + std::to_string(loss_v) +
                                      " at epoch " + std::to_string(epoch) + ", batch " +
                                      std::to_string(b));
            }
            for (auto& p : params) p.tensor.zero_grad();
            tape.backward(loss);
            if (tc.optimizer == OptimizerKind::kAdam) {
                AdamConfig step_cfg = tc.adam;
                step_cfg.lr = lr;
                adam_step(params, adam_state, step_cfg, lr);
            } else {
                sgd_step(params, sgd_state, tc.sgd, lr);
            }
            epoch_loss += loss_v;
            ++global_step;
        }
        MetricsRow row;
        row.epoch = epoch;
        row.phase = "finetune";
        row.loss = epoch_loss / static_cast<double>(plan.batch_count);
        row.lr = epoch_lr;
        const bool eval_now = ((epoch + 1) % tc.eval_every == 0) || epoch == tc.epochs - 1;
        if (eval_now) {
            const double val_miou = evaluate_split(model, val_entries, store, cfg.augment,
                                                   cfg.data.num_classes, cfg.meta, tc.batch_size);
            row.miou = val_miou;
            if (tracker.offer(epoch, val_miou)) {
                best = make_checkpoint(params, static_cast<std::uint32_t>(epoch),
                                       run_rng_state(tc.seed, epoch), format_run_config(cfg));
            }
        }
        rows.push_back(std::move(row));
    }
    result.best_epoch = tracker.best_epoch;
    result.best_val_miou = tracker.best_value;

    apply_checkpoint(best, params);
    result.test_miou = evaluate_split(model, test_entries, store, cfg.augment,
                                      cfg.data.num_classes, cfg.meta, tc.batch_size);

    result.rows = rows;
    result.metrics_csv = cfg.data.output_dir + "/metrics_finetune.csv";
    write_metrics_csv(result.metrics_csv, rows, cfg.encoder.stage_count);
    result.model_checkpoint = cfg.data.output_dir + "/finetune_best.ckpt";
    save_checkpoint(result.model_checkpoint, best);
    return result;
}

SourcePretrainResult pretrain_source(const RunConfig& cfg_in) {
    RunConfig cfg = cfg_in;
    cfg.train.phase = Phase::kSourcePretrain;
    cfg.validate();
    const TrainConfig& tc = cfg.train;

    PatchDataset manifest = load_manifest(cfg.data.manifest);
    std::vector<PatchEntry> entries = manifest.with_split(Split::kTrain);
    if (entries.empty()) throw ValueError("source pretrain: manifest has no train entries");

    ensure_dir(cfg.data.output_dir);
    write_run_config(cfg.data.output_dir + "/resolved_source_pretrain.toml", cfg);

    ImageStore store(cfg.data.image_dir, cfg.data.num_classes);
    Encoder encoder(cfg.encoder);
    encoder.init_random(tc.seed);
    const int last_ch = cfg.encoder.stage_channels(cfg.encoder.stage_count - 1);
    ParamStore head;
    head.add("classifier.weight", Tensor::zeros({last_ch, cfg.data.num_classes}));
    head.add("classifier.bias", Tensor::zeros({cfg.data.num_classes}));
    {
        Rng rng = Rng::stream(tc.seed, 0xc1a55ULL);
        Tensor w = head.find("classifier.weight");
        Tensor init = kaiming_uniform(w.shape(), w.dim(0), rng);
        std::copy(init.data().begin(), init.data().end(), w.data().begin());
    }
    std::vector<NamedParam> params = ParamStore::merge({&encoder.params(), &head});

    SgdState sgd_state;
    AdamState adam_state;
    const std::size_t n = entries.size();
    const std::size_t eff_batch = std::min<std::size_t>(static_cast<std::size_t>(tc.batch_size), n);
    const std::size_t steps_per_epoch = (n + eff_batch - 1) / eff_batch;
    const std::int64_t total_steps = static_cast<std::int64_t>(steps_per_epoch) * tc.epochs;

    std::vector<MetricsRow> rows;
    SourcePretrainResult result;
    std::int64_t global_step = 0;
    for (int epoch = 0; epoch < tc.epochs; ++epoch) {
        const EpochBatches plan = plan_epoch(n, tc.batch_size, tc.seed, epoch, /*drop_last=*/false);
        double epoch_loss = 0.0;
        double epoch_lr = scheduled_lr(tc, epoch, global_step, total_steps);
        std::int64_t correct = 0, seen = 0;
        for (std::size_t b = 0; b < plan.batch_count; ++b) {
            const double lr = scheduled_lr(tc, epoch, global_step, total_steps);
            epoch_lr = lr;
            const std::size_t begin = b * plan.batch_size;
            const std::size_t end = std::min(n, begin + plan.batch_size);
            std::vector<Tensor> images;
            std::vector<std::int32_t> labels;
            for (std::size_t pos = begin; pos < end; ++pos) {
                const PatchEntry& e = entries[plan.order[pos]];
                const ImageRecord& img = store.get(e.image_id);
                if (!img.has_mask()) {
                    throw ValueError("source pretrain: image '" + e.image_id + "' has no mask");
                }
                const ImageRecord patch = extract_patch(img, e.x, e.y, e.patch_size);
                images.push_back(normalize(patch_to_tensor(patch), cfg.augment.normalize_mean,
                                           cfg.augment.normalize_std));
                labels.push_back(
                    static_cast<std::int32_t>(dominant_class(patch.mask, cfg.data.num_classes)));
            }
            const Tensor batch = stack_images(images);
            Tape tape;
            const StageFeatureSet features = encoder.forward(tape, batch);
            const Tensor logits = linear(tape, features.gap_vectors.back(),
                                         head.find("classifier.weight"), head.find("classifier.bias"));
            const Tensor loss = cross_entropy(tape, logits, labels);
            const float loss_v = loss.value();
            if (!std::isfinite(loss_v)) {
                throw TrainAbortError("non-finite classification loss " + std::to_string(loss_v) +
                                      " at epoch " + std::to_string(epoch) + ", batch " +
                                      std::to_string(b));
            }
            // pre-update training accuracy
            const float* lp = logits.data().data();
            for (std::int64_t i = 0; i < logits.dim(0); ++i) {
                std::int64_t arg = 0;
                for (std::int64_t c = 1; c < logits.dim(1); ++c) {
                    if (lp[i * logits.dim(1) + c] > lp[i * logits.dim(1) + arg]) arg = c;
                }
                correct += arg == labels[static_cast<std::size_t>(i)] ? 1 : 0;
                ++seen;
            }
            for (auto& p : params) p.tensor.zero_grad();
            tape.backward(loss);
            if (tc.optimizer == OptimizerKind::kSgd) {
                sgd_step(params, sgd_state, tc.sgd, lr);
            } else {
                AdamConfig step_cfg = tc.adam;
                step_cfg.lr = lr;
                adam_step(params, adam_state, step_cfg, lr);
            }
            epoch_loss += loss_v;
            ++global_step;
        }
        MetricsRow row;
        row.epoch = epoch;
        row.phase = "source_pretrain";
        row.loss = epoch_loss / static_cast<double>(plan.batch_count);
        row.lr = epoch_lr;
        rows.push_back(std::move(row));
        result.final_train_accuracy = static_cast<double>(correct) / static_cast<double>(seen);
    }

    result.rows = rows;
    result.metrics_csv = cfg.data.output_dir + "/metrics_source_pretrain.csv";
    write_metrics_csv(result.metrics_csv, rows, cfg.encoder.stage_count);
    // encoder only: the classifier head is not part of the transferable weights
    Checkpoint ckpt = make_checkpoint(encoder.params().entries(),
                                      static_cast<std::uint32_t>(tc.epochs),
                                      run_rng_state(tc.seed, tc.epochs), format_run_config(cfg));
    result.encoder_checkpoint = cfg.data.output_dir + "/source_encoder.ckpt";
    save_checkpoint(result.encoder_checkpoint, ckpt);
    return result;
}

EvalReport evaluate_checkpoint(const RunConfig& cfg, const std::string& checkpoint_path,
                               Split split, const std::string& pred_out_dir) {
    PatchDataset manifest = load_manifest(cfg.data.manifest);
    const std::vector<PatchEntry> entries = manifest.with_split(split);
    if (entries.empty()) {
        throw ValueError(std::string("eval: manifest has no '") + split_name(split) + "' entries");
    }
    ImageStore store(cfg.data.image_dir, cfg.data.num_classes);
    SegModel model(cfg.encoder, cfg.decoder);
    {
        std::vector<NamedParam> params = model.all_params();
        apply_checkpoint(load_checkpoint(checkpoint_path), params);
    }
    if (!pred_out_dir.empty()) ensure_dir(pred_out_dir);

    EvalReport report;
    report.num_classes = cfg.data.num_classes;
    std::map<std::string, IouAccumulator> per_image;
    IouAccumulator pooled(cfg.data.num_classes);
    for (const auto& e : entries) {
        const ImageRecord& img = store.get(e.image_id);
        if (!img.has_mask()) throw ValueError("eval: image '" + e.image_id + "' has no mask");
        const ImageRecord patch = extract_patch(img, e.x, e.y, e.patch_size);
        const Tensor input =
            normalize(patch_to_tensor(patch), cfg.augment.normalize_mean, cfg.augment.normalize_std);
        Tape tape(/*grad_enabled=*/false);
        const PredBatch pred = model.forward(tape, stack_images({input}));
        const std::vector<std::uint8_t> pred_classes = argmax_classes(pred.logits);
        pooled.add(pred_classes, patch.mask);
        auto [it, inserted] = per_image.try_emplace(e.image_id, cfg.data.num_classes);
        it->second.add(pred_classes, patch.mask);
        if (!pred_out_dir.empty()) {
            const std::string name = pred_out_dir + "/pred_" + e.image_id + "_" +
                                     std::to_string(e.x) + "_" + std::to_string(e.y) + ".pgm";
            save_mask(name, pred_classes, e.patch_size, e.patch_size);
        }
    }
    const IouResult pooled_res = pooled.result(cfg.meta.miou_absent_rule);
    report.pooled_per_class = pooled_res.per_class;
    report.pooled_miou = pooled_res.mean;
    double total = 0.0;
    for (const auto& [id, acc] : per_image) {
        const IouResult r = acc.result(cfg.meta.miou_absent_rule);
        report.per_image.push_back({id, r.per_class, r.mean});
        total += r.mean;
    }
    report.mean_per_image_miou = total / static_cast<double>(per_image.size());
    return report;
}

}  // namespace matssl
