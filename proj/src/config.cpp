#include "matssl/config.hpp"

#include <charconv>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <vector>

namespace matssl {

void TrainConfig::validate() const {
    if (epochs < 1) throw ConfigError("run.epochs must be >= 1");
    if (base_lr() <= 0.0) throw ConfigError("optimizer.lr must be > 0");
    if (batch_size < 1) throw ConfigError("run.batch_size must be >= 1");
    if (phase == Phase::kSsl && batch_size < 2) {
        throw ConfigError("run.batch_size must be >= 2 for the ssl phase");
    }
    if (eval_every < 1) throw ConfigError("run.eval_every must be >= 1");
    if (temperature <= 0.0f) throw ConfigError("run.temperature must be > 0");
    if (lr_min < 0.0) throw ConfigError("schedule.lr_min must be >= 0");
}

void RunConfig::validate() const {
    train.validate();
    augment.validate();
    encoder.validate();
    decoder.validate();
    if (data.num_classes < 2) throw ConfigError("data.num_classes must be >= 2");
}

const char* phase_name(Phase p) {
    switch (p) {
        case Phase::kAuto: return "auto";
        case Phase::kSourcePretrain: return "source_pretrain";
        case Phase::kSsl: return "ssl";
        case Phase::kFinetune: return "finetune";
    }
    return "?";
}

namespace {

struct Value {
    enum Kind { kInt, kFloat, kBool, kString, kArray } kind = kInt;
    std::int64_t i = 0;
    double f = 0.0;
    bool b = false;
    std::string s;
    std::vector<double> arr;
    int line = 0;
};

[[noreturn]] void bad(const std::string& origin, int line, const std::string& what) {
    throw ConfigError(origin + ":" + std::to_string(line) + ": " + what);
}

Value parse_value(std::string text, const std::string& origin, int line) {
    Value v;
    v.line = line;
    if (text.empty()) bad(origin, line, "empty value");
    if (text.front() == '"') {
        if (text.size() < 2 || text.back() != '"') bad(origin, line, "unterminated string");
        v.kind = Value::kString;
        v.s = text.substr(1, text.size() - 2);
        return v;
    }
    if (text == "true" || text == "false") {
        v.kind = Value::kBool;
        v.b = text == "true";
        return v;
    }
    if (text.front() == '[') {
        if (text.back() != ']') bad(origin, line, "unterminated array");
        v.kind = Value::kArray;
        std::string inner = text.substr(1, text.size() - 2);
        std::istringstream ss(inner);
        std::string item;
        while (std::getline(ss, item, ',')) {
            const std::size_t b0 = item.find_first_not_of(" \t");
            if (b0 == std::string::npos) bad(origin, line, "empty array element");
            const std::size_t b1 = item.find_last_not_of(" \t");
            item = item.substr(b0, b1 - b0 + 1);
            try {
                v.arr.push_back(std::stod(item));
            } catch (const std::exception&) {
                bad(origin, line, "array element '" + item + "' is not a number");
            }
        }
        return v;
    }
    // bare number: int when it round-trips as one
    try {
        std::size_t used = 0;
        const double d = std::stod(text, &used);
        if (used != text.size()) bad(origin, line, "trailing characters after number '" + text + "'");
        v.f = d;
        if (text.find_first_of(".eE") == std::string::npos) {
            v.kind = Value::kInt;
            v.i = std::stoll(text);
        } else {
            v.kind = Value::kFloat;
        }
        return v;
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception&) {
        bad(origin, line, "cannot parse value '" + text + "'");
    }
}

class ParsedConfig {
public:
    ParsedConfig(const std::string& text, std::string origin) : origin_(std::move(origin)) {
        std::istringstream ss(text);
        std::string line;
        std::string section;
        int lineno = 0;
        while (std::getline(ss, line)) {
            ++lineno;
            // strip comment (quotes in our keys never contain '#')
            bool in_quote = false;
            for (std::size_t i = 0; i < line.size(); ++i) {
                if (line[i] == '"') in_quote = !in_quote;
                if (line[i] == '#' && !in_quote) {
                    line = line.substr(0, i);
                    break;
                }
            }
            const std::size_t b0 = line.find_first_not_of(" \t\r");
            if (b0 == std::string::npos) continue;
            const std::size_t b1 = line.find_last_not_of(" \t\r");
            line = line.substr(b0, b1 - b0 + 1);
            if (line.front() == '[') {
                if (line.back() != ']') bad(origin_, lineno, "unterminated section header");
                section = line.substr(1, line.size() - 2);
                continue;
            }
            const std::size_t eq = line.find('=');
            if (eq == std::string::npos) bad(origin_, lineno, "expected key = value");
            std::string key = line.substr(0, eq);
            std::string val = line.substr(eq + 1);
            const auto trim = [](std::string& s) {
                const std::size_t a = s.find_first_not_of(" \t");
                const std::size_t b = s.find_last_not_of(" \t");
                s = a == std::string::npos ? "" : s.substr(a, b - a + 1);
            };
            trim(key);
            trim(val);
            if (key.empty()) bad(origin_, lineno, "empty key");
            const std::string full = section.empty() ? key : section + "." + key;
            if (values_.count(full)) bad(origin_, lineno, "duplicate key '" + full + "'");
            values_[full] = parse_value(val, origin_, lineno);
        }
    }

    bool has(const std::string& key) const { return values_.count(key) > 0; }

    std::int64_t get_int(const std::string& key, std::int64_t def) {
        const Value* v = take(key);
        if (!v) return def;
        if (v->kind != Value::kInt) bad(origin_, v->line, "'" + key + "' must be an integer");
        return v->i;
    }
    double get_double(const std::string& key, double def) {
        const Value* v = take(key);
        if (!v) return def;
        if (v->kind != Value::kInt && v->kind != Value::kFloat) {
            bad(origin_, v->line, "'" + key + "' must be a number");
        }
        return v->kind == Value::kInt ? static_cast<double>(v->i) : v->f;
    }
    bool get_bool(const std::string& key, bool def) {
        const Value* v = take(key);
        if (!v) return def;
        if (v->kind != Value::kBool) bad(origin_, v->line, "'" + key + "' must be true or false");
        return v->b;
    }
    std::string get_string(const std::string& key, const std::string& def) {
        const Value* v = take(key);
        if (!v) return def;
        if (v->kind != Value::kString) bad(origin_, v->line, "'" + key + "' must be a quoted string");
        return v->s;
    }
    std::vector<double> get_array(const std::string& key, std::vector<double> def,
                                  std::size_t want = 0) {
        const Value* v = take(key);
        if (!v) return def;
        if (v->kind != Value::kArray) bad(origin_, v->line, "'" + key + "' must be an array");
        if (want != 0 && v->arr.size() != want) {
            bad(origin_, v->line,
                "'" + key + "' must have " + std::to_string(want) + " elements");
        }
        return v->arr;
    }

    void reject_unknown() const {
        for (const auto& [key, value] : values_) {
            if (!consumed_.count(key)) {
                throw ConfigError(origin_ + ":" + std::to_string(value.line) + ": unknown key '" +
                                  key + "'");
            }
        }
    }

    [[noreturn]] void fail_key(const std::string& key, const std::string& what) {
        const auto it = values_.find(key);
        bad(origin_, it == values_.end() ? 0 : it->second.line, "'" + key + "' " + what);
    }

private:
    const Value* take(const std::string& key) {
        const auto it = values_.find(key);
        if (it == values_.end()) return nullptr;
        consumed_.insert(key);
        return &it->second;
    }
    std::string origin_;
    std::map<std::string, Value> values_;
    std::set<std::string> consumed_;
};

template <typename T>
T parse_enum(ParsedConfig& pc, const std::string& key, const std::string& raw,
             std::initializer_list<std::pair<const char*, T>> table) {
    for (const auto& [name, value] : table) {
        if (raw == name) return value;
    }
    std::string options;
    for (const auto& [name, value] : table) {
        if (!options.empty()) options += " | ";
        options += name;
    }
    pc.fail_key(key, "must be one of: " + options);
}

std::string fmt_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    std::string s(buf, res.ptr);
    // keep floats visually typed so the parser reads them back as floats
    if (s.find_first_of(".eEni") == std::string::npos) s += ".0";
    return s;
}

}  // namespace

RunConfig parse_run_config_text(const std::string& text, const std::string& origin) {
    ParsedConfig pc(text, origin);
    RunConfig cfg;

    const std::string phase = pc.get_string("run.phase", "auto");
    cfg.train.phase = parse_enum<Phase>(pc, "run.phase", phase,
                                        {{"auto", Phase::kAuto},
                                         {"source_pretrain", Phase::kSourcePretrain},
                                         {"ssl", Phase::kSsl},
                                         {"finetune", Phase::kFinetune}});
    cfg.train.epochs = static_cast<int>(pc.get_int("run.epochs", cfg.train.epochs));
    cfg.train.batch_size = static_cast<int>(pc.get_int("run.batch_size", cfg.train.batch_size));
    cfg.train.temperature =
        static_cast<float>(pc.get_double("run.temperature", cfg.train.temperature));
    cfg.train.seed = static_cast<std::uint64_t>(pc.get_int("run.seed", 0));
    cfg.train.eval_every = static_cast<int>(pc.get_int("run.eval_every", cfg.train.eval_every));
    cfg.train.freeze_encoder = pc.get_bool("run.freeze_encoder", cfg.train.freeze_encoder);

    const std::string opt = pc.get_string("optimizer.kind", "sgd");
    cfg.train.optimizer = parse_enum<OptimizerKind>(
        pc, "optimizer.kind", opt, {{"sgd", OptimizerKind::kSgd}, {"adam", OptimizerKind::kAdam}});
    const bool is_sgd = cfg.train.optimizer == OptimizerKind::kSgd;
    const double lr = pc.get_double("optimizer.lr", is_sgd ? cfg.train.sgd.lr : cfg.train.adam.lr);
    const double wd = pc.get_double("optimizer.weight_decay",
                                    is_sgd ? cfg.train.sgd.weight_decay : cfg.train.adam.weight_decay);
    cfg.train.sgd.lr = is_sgd ? lr : cfg.train.sgd.lr;
    cfg.train.sgd.weight_decay = is_sgd ? wd : cfg.train.sgd.weight_decay;
    cfg.train.adam.lr = is_sgd ? cfg.train.adam.lr : lr;
    cfg.train.adam.weight_decay = is_sgd ? cfg.train.adam.weight_decay : wd;
    cfg.train.sgd.momentum = pc.get_double("optimizer.momentum", cfg.train.sgd.momentum);
    cfg.train.adam.beta1 = pc.get_double("optimizer.beta1", cfg.train.adam.beta1);
    cfg.train.adam.beta2 = pc.get_double("optimizer.beta2", cfg.train.adam.beta2);
    cfg.train.adam.eps = pc.get_double("optimizer.eps", cfg.train.adam.eps);

    const std::string sched = pc.get_string("schedule.kind", "cosine");
    cfg.train.schedule = parse_enum<ScheduleKind>(
        pc, "schedule.kind", sched,
        {{"cosine", ScheduleKind::kCosine}, {"constant", ScheduleKind::kConstant}});
    cfg.train.lr_min = pc.get_double("schedule.lr_min", cfg.train.lr_min);
    const std::string gran = pc.get_string("schedule.granularity", "epoch");
    cfg.train.granularity = parse_enum<ScheduleGranularity>(
        pc, "schedule.granularity", gran,
        {{"epoch", ScheduleGranularity::kEpoch}, {"iteration", ScheduleGranularity::kIteration}});

    cfg.augment.view_size = static_cast<int>(pc.get_int("augment.view_size", cfg.augment.view_size));
    auto crop = pc.get_array("augment.crop_scale_range",
                             {cfg.augment.crop_scale_range.first, cfg.augment.crop_scale_range.second}, 2);
    cfg.augment.crop_scale_range = {crop[0], crop[1]};
    cfg.augment.flip_prob = pc.get_double("augment.flip_prob", cfg.augment.flip_prob);
    cfg.augment.jitter_delta = pc.get_double("augment.jitter_delta", cfg.augment.jitter_delta);
    cfg.augment.grayscale_prob = pc.get_double("augment.grayscale_prob", cfg.augment.grayscale_prob);
    cfg.augment.blur_prob = pc.get_double("augment.blur_prob", cfg.augment.blur_prob);
    auto sig = pc.get_array("augment.blur_sigma_range",
                            {cfg.augment.blur_sigma_range.first, cfg.augment.blur_sigma_range.second}, 2);
    cfg.augment.blur_sigma_range = {sig[0], sig[1]};
    auto mean = pc.get_array("augment.normalize_mean",
                             {cfg.augment.normalize_mean[0], cfg.augment.normalize_mean[1],
                              cfg.augment.normalize_mean[2]},
                             3);
    auto stdv = pc.get_array("augment.normalize_std",
                             {cfg.augment.normalize_std[0], cfg.augment.normalize_std[1],
                              cfg.augment.normalize_std[2]},
                             3);
    for (int i = 0; i < 3; ++i) {
        cfg.augment.normalize_mean[static_cast<std::size_t>(i)] = static_cast<float>(mean[static_cast<std::size_t>(i)]);
        cfg.augment.normalize_std[static_cast<std::size_t>(i)] = static_cast<float>(stdv[static_cast<std::size_t>(i)]);
    }

    cfg.encoder.stage_count = static_cast<int>(pc.get_int("encoder.stage_count", cfg.encoder.stage_count));
    cfg.encoder.base_channels =
        static_cast<int>(pc.get_int("encoder.base_channels", cfg.encoder.base_channels));
    cfg.encoder.blocks_per_stage =
        static_cast<int>(pc.get_int("encoder.blocks_per_stage", cfg.encoder.blocks_per_stage));
    cfg.encoder.input_channels =
        static_cast<int>(pc.get_int("encoder.input_channels", cfg.encoder.input_channels));

    auto taps = pc.get_array("ssl.tap_stages", {});
    for (double t : taps) cfg.fusion.tap_stages.push_back(static_cast<int>(t));
    const std::string gate = pc.get_string("ssl.gate_variant", "scalar");
    cfg.fusion.gate_variant = parse_enum<GateVariant>(
        pc, "ssl.gate_variant", gate,
        {{"scalar", GateVariant::kScalar}, {"channel", GateVariant::kPerChannel}});
    cfg.fusion.gate_init = static_cast<float>(pc.get_double("ssl.gate_init", cfg.fusion.gate_init));
    cfg.fusion.hidden = static_cast<int>(pc.get_int("ssl.hidden", cfg.fusion.hidden));
    cfg.fusion.embed_dim = static_cast<int>(pc.get_int("ssl.embed_dim", cfg.fusion.embed_dim));

    cfg.decoder.nested_skip = pc.get_bool("decoder.nested_skip", cfg.decoder.nested_skip);

    cfg.data.image_dir = pc.get_string("data.image_dir", cfg.data.image_dir);
    cfg.data.manifest = pc.get_string("data.manifest", cfg.data.manifest);
    cfg.data.num_classes = static_cast<int>(pc.get_int("data.num_classes", cfg.data.num_classes));
    cfg.decoder.num_classes = cfg.data.num_classes;
    cfg.data.encoder_init = pc.get_string("data.encoder_init", cfg.data.encoder_init);
    cfg.data.output_dir = pc.get_string("data.output_dir", cfg.data.output_dir);

    const std::string conv = pc.get_string("meta.miou_convention", "pooled");
    cfg.meta.miou_convention = parse_enum<MiouConvention>(
        pc, "meta.miou_convention", conv,
        {{"pooled", MiouConvention::kPooled}, {"per_image", MiouConvention::kPerImage}});
    const std::string rule = pc.get_string("meta.miou_absent_rule", "exclude");
    cfg.meta.miou_absent_rule = parse_enum<AbsentClassRule>(
        pc, "meta.miou_absent_rule", rule,
        {{"exclude", AbsentClassRule::kExclude},
         {"one", AbsentClassRule::kScoreOne},
         {"zero", AbsentClassRule::kScoreZero}});

    pc.reject_unknown();
    cfg.validate();
    return cfg;
}

RunConfig parse_run_config(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot open config file '" + path + "'");
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse_run_config_text(text, path);
}

std::string format_run_config(const RunConfig& cfg) {
    std::ostringstream os;
    os << "[run]\n";
    os << "phase = \"" << phase_name(cfg.train.phase) << "\"\n";
    os << "epochs = " << cfg.train.epochs << "\n";
    os << "batch_size = " << cfg.train.batch_size << "\n";
    os << "temperature = " << fmt_double(cfg.train.temperature) << "\n";
    os << "seed = " << cfg.train.seed << "\n";
    os << "eval_every = " << cfg.train.eval_every << "\n";
    os << "freeze_encoder = " << (cfg.train.freeze_encoder ? "true" : "false") << "\n";
    os << "\n[optimizer]\n";
    const bool is_sgd = cfg.train.optimizer == OptimizerKind::kSgd;
    os << "kind = \"" << (is_sgd ? "sgd" : "adam") << "\"\n";
    os << "lr = " << fmt_double(is_sgd ? cfg.train.sgd.lr : cfg.train.adam.lr) << "\n";
    os << "momentum = " << fmt_double(cfg.train.sgd.momentum) << "\n";
    os << "weight_decay = "
       << fmt_double(is_sgd ? cfg.train.sgd.weight_decay : cfg.train.adam.weight_decay) << "\n";
    os << "beta1 = " << fmt_double(cfg.train.adam.beta1) << "\n";
    os << "beta2 = " << fmt_double(cfg.train.adam.beta2) << "\n";
    os << "eps = " << fmt_double(cfg.train.adam.eps) << "\n";
    os << "\n[schedule]\n";
    os << "kind = \"" << (cfg.train.schedule == ScheduleKind::kCosine ? "cosine" : "constant")
       << "\"\n";
    os << "lr_min = " << fmt_double(cfg.train.lr_min) << "\n";
    os << "granularity = \""
       << (cfg.train.granularity == ScheduleGranularity::kEpoch ? "epoch" : "iteration") << "\"\n";
    os << "\n[augment]\n";
    os << "view_size = " << cfg.augment.view_size << "\n";
    os << "crop_scale_range = [" << fmt_double(cfg.augment.crop_scale_range.first) << ", "
       << fmt_double(cfg.augment.crop_scale_range.second) << "]\n";
    os << "flip_prob = " << fmt_double(cfg.augment.flip_prob) << "\n";
    os << "jitter_delta = " << fmt_double(cfg.augment.jitter_delta) << "\n";
    os << "grayscale_prob = " << fmt_double(cfg.augment.grayscale_prob) << "\n";
    os << "blur_prob = " << fmt_double(cfg.augment.blur_prob) << "\n";
    os << "blur_sigma_range = [" << fmt_double(cfg.augment.blur_sigma_range.first) << ", "
       << fmt_double(cfg.augment.blur_sigma_range.second) << "]\n";
    os << "normalize_mean = [" << fmt_double(cfg.augment.normalize_mean[0]) << ", "
       << fmt_double(cfg.augment.normalize_mean[1]) << ", " << fmt_double(cfg.augment.normalize_mean[2])
       << "]\n";
    os << "normalize_std = [" << fmt_double(cfg.augment.normalize_std[0]) << ", "
       << fmt_double(cfg.augment.normalize_std[1]) << ", " << fmt_double(cfg.augment.normalize_std[2])
       << "]\n";
    os << "\n[encoder]\n";
    os << "stage_count = " << cfg.encoder.stage_count << "\n";
    os << "base_channels = " << cfg.encoder.base_channels << "\n";
    os << "blocks_per_stage = " << cfg.encoder.blocks_per_stage << "\n";
    os << "input_channels = " << cfg.encoder.input_channels << "\n";
    os << "\n[ssl]\n";
    os << "tap_stages = [";
    for (std::size_t i = 0; i < cfg.fusion.tap_stages.size(); ++i) {
        if (i) os << ", ";
        os << cfg.fusion.tap_stages[i];
    }
    os << "]\n";
    os << "gate_variant = \""
       << (cfg.fusion.gate_variant == GateVariant::kScalar ? "scalar" : "channel") << "\"\n";
    os << "gate_init = " << fmt_double(cfg.fusion.gate_init) << "\n";
    os << "hidden = " << cfg.fusion.hidden << "\n";
    os << "embed_dim = " << cfg.fusion.embed_dim << "\n";
    os << "\n[decoder]\n";
    os << "nested_skip = " << (cfg.decoder.nested_skip ? "true" : "false") << "\n";
    os << "\n[data]\n";
    os << "image_dir = \"" << cfg.data.image_dir << "\"\n";
    os << "manifest = \"" << cfg.data.manifest << "\"\n";
    os << "num_classes = " << cfg.data.num_classes << "\n";
    os << "encoder_init = \"" << cfg.data.encoder_init << "\"\n";
    os << "output_dir = \"" << cfg.data.output_dir << "\"\n";
    os << "\n[meta]\n";
    os << "miou_convention = \""
       << (cfg.meta.miou_convention == MiouConvention::kPooled ? "pooled" : "per_image") << "\"\n";
    const char* rule = cfg.meta.miou_absent_rule == AbsentClassRule::kExclude
                           ? "exclude"
                           : (cfg.meta.miou_absent_rule == AbsentClassRule::kScoreOne ? "one" : "zero");
    os << "miou_absent_rule = \"" << rule << "\"\n";
    return os.str();
}

void write_run_config(const std::string& path, const RunConfig& cfg) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot open '" + path + "' for writing");
    f << format_run_config(cfg);
    if (!f) throw ConfigError("write failed on '" + path + "'");
}

}  // namespace matssl
