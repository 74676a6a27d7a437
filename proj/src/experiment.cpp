#include "rtcl/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "rtcl/checkpoint.hpp"
#include "rtcl/ops.hpp"

namespace rtcl {

namespace {

std::string fmt_real(real v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), static_cast<double>(v));
    return std::string(buf, res.ptr);
}

real parse_real(const std::string& s, const std::string& key) {
    double v = 0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
        throw ConfigError("bad numeric value '" + s + "' for key " + key);
    }
    return static_cast<real>(v);
}

long parse_long(const std::string& s, const std::string& key) {
    long v = 0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
        throw ConfigError("bad integer value '" + s + "' for key " + key);
    }
    return v;
}

class PhaseTimer {
public:
    PhaseTimer(std::map<std::string, double>& sink, std::string key)
        : sink_(sink), key_(std::move(key)), start_(std::chrono::steady_clock::now()) {}
    ~PhaseTimer() {
        const auto stop = std::chrono::steady_clock::now();
        sink_[key_] += std::chrono::duration<double>(stop - start_).count();
    }

private:
    std::map<std::string, double>& sink_;
    std::string key_;
    std::chrono::steady_clock::time_point start_;
};

}  // namespace

void ExperimentConfig::validate() const {
    if (tasks < 1) throw ConfigError("tasks must be >= 1");
    if (capacity == 0) throw ConfigError("capacity must be >= 1, or negative for unlimited");
    if (replay_m < 1) throw ConfigError("replay memory size must be >= 1");
    if (alpha < real(0) || alpha > real(1)) throw ConfigError("alpha must lie in [0, 1]");
    if (lora_rank < 1 || ae_latent < 1 || ae_hidden < 1) throw ConfigError("ranks must be >= 1");
    if (lr_adapter <= real(0) || lr_ae <= real(0) || lr_pretrain <= real(0)) {
        throw ConfigError("learning rates must be positive");
    }
    if (batch_train < 1 || batch_test < 1 || batch_ae < 1 || replay_batch < 1) {
        throw ConfigError("batch sizes must be >= 1");
    }
    if (epochs_adapter < 0 || epochs_ae < 0 || epochs_pretrain < 0 || epochs_distill < 0) {
        throw ConfigError("epoch counts must be >= 0");
    }
    if (train_per_class < 1 || test_per_class < 1 || pretext_per_class < 1) {
        throw ConfigError("per-class sample counts must be >= 1");
    }
    if (dataset != "synthetic" && dataset != "mnist") {
        throw ConfigError("dataset must be 'synthetic' or 'mnist', got '" + dataset + "'");
    }
    if (dataset == "mnist" && data_dir.empty()) throw ConfigError("mnist dataset needs --data");
    backbone.validate();
}

std::string ExperimentConfig::to_kv() const {
    std::ostringstream out;
    out << "mode=" << (mode == TaskMode::Split ? "split" : "permutation") << "\n";
    out << "dataset=" << dataset << "\n";
    out << "data_dir=" << data_dir << "\n";
    out << "out_dir=" << out_dir << "\n";
    out << "tasks=" << tasks << "\n";
    out << "capacity=" << capacity << "\n";
    out << "replay_m=" << replay_m << "\n";
    out << "alpha=" << fmt_real(alpha) << "\n";
    out << "lora_rank=" << lora_rank << "\n";
    out << "ae_latent=" << ae_latent << "\n";
    out << "ae_hidden=" << ae_hidden << "\n";
    out << "lr_adapter=" << fmt_real(lr_adapter) << "\n";
    out << "lr_ae=" << fmt_real(lr_ae) << "\n";
    out << "lr_pretrain=" << fmt_real(lr_pretrain) << "\n";
    out << "batch_train=" << batch_train << "\n";
    out << "batch_test=" << batch_test << "\n";
    out << "batch_ae=" << batch_ae << "\n";
    out << "replay_batch=" << replay_batch << "\n";
    out << "epochs_adapter=" << epochs_adapter << "\n";
    out << "epochs_ae=" << epochs_ae << "\n";
    out << "epochs_pretrain=" << epochs_pretrain << "\n";
    out << "epochs_distill=" << epochs_distill << "\n";
    out << "train_per_class=" << train_per_class << "\n";
    out << "test_per_class=" << test_per_class << "\n";
    out << "pretext_per_class=" << pretext_per_class << "\n";
    out << "first_permutation_identity=" << (first_permutation_identity ? 1 : 0) << "\n";
    out << "seed=" << seed << "\n";
    out << "backbone_image_h=" << backbone.image_h << "\n";
    out << "backbone_image_w=" << backbone.image_w << "\n";
    out << "backbone_channels=" << backbone.channels << "\n";
    out << "backbone_patch=" << backbone.patch << "\n";
    out << "backbone_dim=" << backbone.dim << "\n";
    out << "backbone_layers=" << backbone.layers << "\n";
    out << "backbone_heads=" << backbone.heads << "\n";
    out << "backbone_mlp_dim=" << backbone.mlp_dim << "\n";
    return out.str();
}

ExperimentConfig ExperimentConfig::from_kv(const std::string& text) {
    ExperimentConfig cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(lineno) + " is not key=value: " + line);
        }
        const std::string key = line.substr(0, eq);
        const std::string val = line.substr(eq + 1);
        if (key == "mode") {
            if (val == "split") cfg.mode = TaskMode::Split;
            else if (val == "permutation") cfg.mode = TaskMode::Permutation;
            else throw ConfigError("mode must be split or permutation, got '" + val + "'");
        } else if (key == "dataset") cfg.dataset = val;
        else if (key == "data_dir") cfg.data_dir = val;
        else if (key == "out_dir") cfg.out_dir = val;
        else if (key == "tasks") cfg.tasks = static_cast<int>(parse_long(val, key));
        else if (key == "capacity") cfg.capacity = static_cast<int>(parse_long(val, key));
        else if (key == "replay_m") cfg.replay_m = static_cast<int>(parse_long(val, key));
        else if (key == "alpha") cfg.alpha = parse_real(val, key);
        else if (key == "lora_rank") cfg.lora_rank = static_cast<int>(parse_long(val, key));
        else if (key == "ae_latent") cfg.ae_latent = static_cast<int>(parse_long(val, key));
        else if (key == "ae_hidden") cfg.ae_hidden = static_cast<int>(parse_long(val, key));
        else if (key == "lr_adapter") cfg.lr_adapter = parse_real(val, key);
        else if (key == "lr_ae") cfg.lr_ae = parse_real(val, key);
        else if (key == "lr_pretrain") cfg.lr_pretrain = parse_real(val, key);
        else if (key == "batch_train") cfg.batch_train = static_cast<int>(parse_long(val, key));
        else if (key == "batch_test") cfg.batch_test = static_cast<int>(parse_long(val, key));
        else if (key == "batch_ae") cfg.batch_ae = static_cast<int>(parse_long(val, key));
        else if (key == "replay_batch") cfg.replay_batch = static_cast<int>(parse_long(val, key));
        else if (key == "epochs_adapter") cfg.epochs_adapter = static_cast<int>(parse_long(val, key));
        else if (key == "epochs_ae") cfg.epochs_ae = static_cast<int>(parse_long(val, key));
        else if (key == "epochs_pretrain") cfg.epochs_pretrain = static_cast<int>(parse_long(val, key));
        else if (key == "epochs_distill") cfg.epochs_distill = static_cast<int>(parse_long(val, key));
        else if (key == "train_per_class") cfg.train_per_class = static_cast<int>(parse_long(val, key));
        else if (key == "test_per_class") cfg.test_per_class = static_cast<int>(parse_long(val, key));
        else if (key == "pretext_per_class") cfg.pretext_per_class = static_cast<int>(parse_long(val, key));
        else if (key == "first_permutation_identity") cfg.first_permutation_identity = parse_long(val, key) != 0;
        else if (key == "seed") cfg.seed = static_cast<uint64_t>(parse_long(val, key));
        else if (key == "backbone_image_h") cfg.backbone.image_h = static_cast<int>(parse_long(val, key));
        else if (key == "backbone_image_w") cfg.backbone.image_w = static_cast<int>(parse_long(val, key));
        else if (key == "backbone_channels") cfg.backbone.channels = static_cast<int>(parse_long(val, key));
        else if (key == "backbone_patch") cfg.backbone.patch = static_cast<int>(parse_long(val, key));
        else if (key == "backbone_dim") cfg.backbone.dim = static_cast<int>(parse_long(val, key));
        else if (key == "backbone_layers") cfg.backbone.layers = static_cast<int>(parse_long(val, key));
        else if (key == "backbone_heads") cfg.backbone.heads = static_cast<int>(parse_long(val, key));
        else if (key == "backbone_mlp_dim") cfg.backbone.mlp_dim = static_cast<int>(parse_long(val, key));
        else throw ConfigError("unknown config key '" + key + "'");
    }
    return cfg;
}

ExperimentConfig ExperimentConfig::load_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file " + path);
    std::ostringstream buf;
    buf << f.rdbuf();
    return from_kv(buf.str());
}

real MetricsLog::avg_acc() const { return avg_task_accuracy(acc_final); }

real avg_task_accuracy(const std::vector<real>& accs) {
    if (accs.empty()) throw Error("average task accuracy over an empty list");
    real s = 0;
    for (real a : accs) {
        if (a < real(0) || a > real(1)) throw Error("task accuracy outside [0, 1]");
        s += a;
    }
    return s / static_cast<real>(accs.size());
}

namespace {

// Pretext class ids are kept in a separate label space so the disjointness
// check against the continual stream is meaningful in every mode.
constexpr int kPretextIdOffset = 1000;

struct Prepared {
    Dataset train;
    Dataset test;
    std::vector<TaskSpec> specs;
    PretrainData pretext;
    std::vector<int> continual_class_ids;
};

Dataset subsample_per_class(const Dataset& ds, int per_class, Rng& rng) {
    if (per_class <= 0) return ds;
    Dataset out;
    out.h = ds.h;
    out.w = ds.w;
    out.c = ds.c;
    for (int cls : ds.classes()) {
        std::vector<int> members;
        for (std::size_t i = 0; i < ds.labels.size(); ++i)
            if (ds.labels[i] == cls) members.push_back(static_cast<int>(i));
        rng.shuffle(members);
        const int take = std::min<int>(per_class, static_cast<int>(members.size()));
        for (int i = 0; i < take; ++i) {
            out.images.push_back(ds.images[static_cast<std::size_t>(members[static_cast<std::size_t>(i)])]);
            out.labels.push_back(cls);
        }
    }
    return out;
}

Prepared prepare_data(const ExperimentConfig& cfg) {
    Prepared p;
    Rng rng_train(Rng::mix(cfg.seed, 1));
    Rng rng_test(Rng::mix(cfg.seed, 2));
    Rng rng_stream(Rng::mix(cfg.seed, 3));
    Rng rng_pretext(Rng::mix(cfg.seed, 4));

    std::vector<int> stream_classes;
    for (int c = 0; c < 10; ++c) stream_classes.push_back(c);

    if (cfg.dataset == "synthetic") {
        p.train = make_glyphs(stream_classes, cfg.train_per_class, rng_train);
        p.test = make_glyphs(stream_classes, cfg.test_per_class, rng_test);
    } else {
        Dataset full_train = load_idx_dir(cfg.data_dir, true);
        Dataset full_test = load_idx_dir(cfg.data_dir, false);
        p.train = subsample_per_class(full_train, cfg.train_per_class, rng_train);
        p.test = subsample_per_class(full_test, cfg.test_per_class, rng_test);
        stream_classes = p.train.classes();
    }

    if (cfg.mode == TaskMode::Split) {
        p.specs = make_splits(p.train, p.test, stream_classes, cfg.tasks, rng_stream);
    } else {
        p.specs = make_permutations(p.train, p.test, cfg.tasks, cfg.first_permutation_identity,
                                    rng_stream);
    }

    for (const auto& spec : p.specs)
        for (int cid : spec.class_ids)
            if (std::find(p.continual_class_ids.begin(), p.continual_class_ids.end(), cid) ==
                p.continual_class_ids.end())
                p.continual_class_ids.push_back(cid);

    // Pretext: held-out glyph classes for synthetic splits, a held-out random
    // pixel permutation otherwise.
    if (cfg.dataset == "synthetic" && cfg.mode == TaskMode::Split) {
        std::vector<int> pretext_classes;
        for (int c = 10; c < kGlyphClassCount; ++c) pretext_classes.push_back(c);
        Dataset pd = make_glyphs(pretext_classes, cfg.pretext_per_class, rng_pretext);
        p.pretext.n_classes = static_cast<int>(pretext_classes.size());
        p.pretext.class_ids = pretext_classes;
        for (std::size_t i = 0; i < pd.images.size(); ++i) {
            p.pretext.images.push_back(pd.images[i]);
            p.pretext.labels.push_back(pd.labels[i] - 10);
        }
    } else {
        const int pixels = p.train.h * p.train.w * p.train.c;
        const std::vector<int> held_out_perm = random_permutation(pixels, rng_pretext);
        Dataset base;
        if (cfg.dataset == "synthetic") {
            base = make_glyphs(stream_classes, cfg.pretext_per_class, rng_pretext);
        } else {
            base = subsample_per_class(p.train, cfg.pretext_per_class, rng_pretext);
        }
        const std::vector<int> base_classes = base.classes();
        p.pretext.n_classes = static_cast<int>(base_classes.size());
        for (int cid : base_classes) p.pretext.class_ids.push_back(kPretextIdOffset + cid);
        for (std::size_t i = 0; i < base.images.size(); ++i) {
            p.pretext.images.push_back(apply_permutation(base.images[i], held_out_perm));
            const auto it = std::find(base_classes.begin(), base_classes.end(), base.labels[i]);
            p.pretext.labels.push_back(static_cast<int>(it - base_classes.begin()));
        }
    }
    return p;
}

std::vector<TaskSample> embed_task(const Dataset& ds, const TaskSpec& spec, bool train_set,
                                   const FrozenBackbone& fb) {
    std::vector<TaskSample> out;
    const auto& idx = train_set ? spec.train_idx : spec.test_idx;
    out.reserve(idx.size());
    for (int i : idx) {
        const Tensor& raw = ds.images[static_cast<std::size_t>(i)];
        const Tensor img = spec.perm.empty() ? raw : apply_permutation(raw, spec.perm);
        TaskSample s;
        s.tokens = embed_image(nullptr, img, fb.w);
        s.label = ds.labels[static_cast<std::size_t>(i)];
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<Tensor> tokens_only(const std::vector<TaskSample>& samples) {
    std::vector<Tensor> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(s.tokens);
    return out;
}

enum class EvalMode { Routed, Forced, LastSlot };

struct TaskEvalResult {
    real acc = 0;
    std::vector<int> routed;  // chosen autoencoder per sample (Routed mode)
};

TaskEvalResult eval_task(const std::vector<TaskSample>& test, const ContinualState& st, EvalMode mode,
                         int forced_task) {
    TaskEvalResult res;
    if (test.empty()) throw Error("evaluation set is empty");
    int correct = 0;
    for (const auto& sample : test) {
        std::vector<real> gate;
        int chosen_task = -1;
        if (mode == EvalMode::Routed) {
            RouteResult r = route(sample.tokens, st.router, st.gate_map, st.bank);
            gate = std::move(r.gate);
            chosen_task = r.task;
        } else if (mode == EvalMode::Forced) {
            gate = one_hot_gate(st.bank, st.gate_map.slot_for_task(forced_task));
        } else {
            gate = one_hot_gate(st.bank, st.bank.at(st.bank.size() - 1).id);
            chosen_task = static_cast<int>(st.router.size()) - 1;
        }
        const Prediction pred = predict(sample.tokens, gate, st.bank, st.backbone);
        if (pred.label == sample.label) ++correct;
        res.routed.push_back(chosen_task);
    }
    res.acc = static_cast<real>(correct) / static_cast<real>(test.size());
    return res;
}

RunResult run_pipeline(const ExperimentConfig& cfg, bool ablate, const FrozenBackbone* pretrained) {
    cfg.validate();
    RunResult result;
    result.config = cfg;
    MetricsLog& m = result.metrics;
    m.seed = cfg.seed;

    Prepared data;
    {
        PhaseTimer t(m.wall_seconds, "data");
        data = prepare_data(cfg);
    }
    result.specs = data.specs;

    ContinualState& st = result.state;
    st.bank = AdapterBank(cfg.capacity);
    st.memory.budget_m = cfg.replay_m;

    if (pretrained != nullptr) {
        if (!(pretrained->w.cfg == cfg.backbone)) {
            throw ConfigError("pretrained backbone config does not match the experiment config");
        }
        pretrained->verify_digest();
        st.backbone = *pretrained;
    } else {
        PhaseTimer t(m.wall_seconds, "pretrain");
        Rng rng(Rng::mix(cfg.seed, 5));
        AdamWConfig oc;
        oc.lr = cfg.lr_pretrain;
        PretrainResult pre = pretrain(cfg.backbone, data.pretext, data.continual_class_ids,
                                      cfg.epochs_pretrain, cfg.batch_train, oc, rng);
        st.backbone = std::move(pre.backbone);
    }

    std::vector<std::vector<TaskSample>> train_tokens;
    result.test_tokens.clear();

    for (int t = 0; t < cfg.tasks; ++t) {
        const TaskSpec& spec = data.specs[static_cast<std::size_t>(t)];
        {
            PhaseTimer timer(m.wall_seconds, "embed");
            train_tokens.push_back(embed_task(data.train, spec, true, st.backbone));
            result.test_tokens.push_back(embed_task(data.test, spec, false, st.backbone));
        }
        const auto& task_train = train_tokens.back();
        const auto task_train_tokens = tokens_only(task_train);

        {
            PhaseTimer timer(m.wall_seconds, "autoencoder");
            Rng rng(Rng::mix(cfg.seed, 100 + static_cast<uint64_t>(t)));
            TaskAutoencoder ae =
                cfg.mode == TaskMode::Permutation
                    ? TaskAutoencoder::four_layer(cfg.backbone.dim, cfg.ae_hidden, cfg.ae_latent, rng)
                    : TaskAutoencoder::shallow(cfg.backbone.dim, cfg.ae_latent, rng);
            AeTrainConfig ac;
            ac.epochs = cfg.epochs_ae;
            ac.lr = cfg.lr_ae;
            ac.batch = cfg.batch_ae;
            train_ae(ae, task_train_tokens, ac, rng);
            st.router.aes.push_back(std::move(ae));
        }

        {
            PhaseTimer timer(m.wall_seconds, "herding");
            std::vector<int> labels;
            labels.reserve(task_train.size());
            for (const auto& s : task_train) labels.push_back(s.label);
            st.memory.tasks.push_back(herd_select(st.router.aes.back(), task_train_tokens, labels,
                                                  cfg.replay_m, spec.class_ids));
        }

        const CapacityDecision decision = capacity_gate(st.bank, t + 1, cfg.capacity);
        if (decision == CapacityDecision::Grow) {
            PhaseTimer timer(m.wall_seconds, "adapter");
            Rng rng_init(Rng::mix(cfg.seed, 200 + static_cast<uint64_t>(t)));
            AdapterSlot slot = new_adapter(cfg.lora_rank, cfg.backbone.layers, cfg.backbone.dim,
                                           spec.class_ids, rng_init);
            Rng rng_train(Rng::mix(cfg.seed, 300 + static_cast<uint64_t>(t)));
            AdapterTrainConfig tc;
            tc.lr = cfg.lr_adapter;
            tc.epochs = cfg.epochs_adapter;
            tc.batch = cfg.batch_train;
            train_adapter(slot, task_train, st.backbone, tc, rng_train);
            const int id = st.bank.add(std::move(slot));
            st.gate_map.push_task(id);
        } else {
            PhaseTimer timer(m.wall_seconds, "fusion");
            const int donor_task = select_donor(st.router, task_train_tokens, t);
            const int donor_slot = st.gate_map.slot_for_task(donor_task);
            Rng rng_init(Rng::mix(cfg.seed, 200 + static_cast<uint64_t>(t)));
            AdapterSlot slot = new_adapter(cfg.lora_rank, cfg.backbone.layers, cfg.backbone.dim,
                                           spec.class_ids, rng_init);
            FusionConfig fc;
            fc.alpha = cfg.alpha;
            fc.replay_batch = cfg.replay_batch;
            fc.train.lr = cfg.lr_adapter;
            fc.train.epochs = cfg.distill_epochs();
            fc.train.batch = cfg.batch_train;
            Rng rng_train(Rng::mix(cfg.seed, 300 + static_cast<uint64_t>(t)));
            const uint64_t replay_seed = Rng::mix(cfg.seed, 400 + static_cast<uint64_t>(t));
            FusionEvent ev = distill_fuse(std::move(slot), donor_slot, st.bank, st.gate_map,
                                          st.memory.tasks[static_cast<std::size_t>(donor_task)],
                                          task_train, st.backbone, fc, t, donor_task, rng_train,
                                          replay_seed);
            m.fusion_events.push_back(ev);
        }

        st.backbone.verify_digest();
        st.gate_map.verify(st.bank);

        {
            PhaseTimer timer(m.wall_seconds, "eval");
            m.acc_at_finish.push_back(
                eval_task(result.test_tokens[static_cast<std::size_t>(t)], st, EvalMode::Forced, t).acc);
            std::vector<real> seen;
            for (int i = 0; i <= t; ++i) {
                seen.push_back(eval_task(result.test_tokens[static_cast<std::size_t>(i)], st,
                                         ablate ? EvalMode::LastSlot : EvalMode::Routed, i)
                                   .acc);
            }
            m.running_avg.push_back(avg_task_accuracy(seen));
        }

        m.lora_after_task.push_back(adapter_lora_param_count(st.bank));
        m.footprint_after_task.push_back(adapter_param_count(st.bank) + st.router.param_count());
    }

    {
        PhaseTimer timer(m.wall_seconds, "final_eval");
        m.routing_confusion.assign(static_cast<std::size_t>(cfg.tasks),
                                   std::vector<long>(st.router.size(), 0));
        for (int t = 0; t < cfg.tasks; ++t) {
            const TaskEvalResult r = eval_task(result.test_tokens[static_cast<std::size_t>(t)], st,
                                               ablate ? EvalMode::LastSlot : EvalMode::Routed, t);
            m.acc_final.push_back(r.acc);
            std::vector<long> counts(st.router.size(), 0);
            for (int e : r.routed)
                if (e >= 0) ++counts[static_cast<std::size_t>(e)];
            m.routing_confusion[static_cast<std::size_t>(t)] = counts;
            int maj = 0;
            for (std::size_t e = 1; e < counts.size(); ++e)
                if (counts[e] > counts[static_cast<std::size_t>(maj)]) maj = static_cast<int>(e);
            m.routed_majority.push_back(maj);
        }
    }

    {
        PhaseTimer timer(m.wall_seconds, "heatmap");
        std::vector<std::vector<Tensor>> per_task;
        for (const auto& samples : result.test_tokens) per_task.push_back(tokens_only(samples));
        result.heatmap = routing_heatmap(st.router, per_task);
    }

    m.params_lora = adapter_lora_param_count(st.bank);
    m.params_heads = adapter_head_param_count(st.bank);
    m.params_ae = st.router.param_count();
    return result;
}

}  // namespace

RunResult run_continual(const ExperimentConfig& cfg, const FrozenBackbone* pretrained) {
    return run_pipeline(cfg, false, pretrained);
}

RunResult ablate_routing(const ExperimentConfig& cfg, const FrozenBackbone* pretrained) {
    return run_pipeline(cfg, true, pretrained);
}

FrozenBackbone pretrain_backbone(const ExperimentConfig& cfg, PretrainResult* stats) {
    cfg.validate();
    Prepared data = prepare_data(cfg);
    Rng rng(Rng::mix(cfg.seed, 5));
    AdamWConfig oc;
    oc.lr = cfg.lr_pretrain;
    PretrainResult pre = pretrain(cfg.backbone, data.pretext, data.continual_class_ids,
                                  cfg.epochs_pretrain, cfg.batch_train, oc, rng);
    if (stats != nullptr) {
        stats->initial_loss = pre.initial_loss;
        stats->final_loss = pre.final_loss;
        stats->train_accuracy = pre.train_accuracy;
    }
    return std::move(pre.backbone);
}

std::vector<std::vector<real>> heatmap_for_state(const ContinualState& state,
                                                 const ExperimentConfig& cfg) {
    cfg.validate();
    if (state.router.empty()) throw Error("heatmap needs a trained router bank");
    Prepared data = prepare_data(cfg);
    std::vector<std::vector<Tensor>> per_task;
    for (const auto& spec : data.specs) {
        per_task.push_back(tokens_only(embed_task(data.test, spec, false, state.backbone)));
    }
    return routing_heatmap(state.router, per_task);
}

std::string metrics_csv(const MetricsLog& m) {
    std::ostringstream out;
    out << "task_id,acc_after_final,running_avg_acc,routed_to,params_trainable,seed\n";
    for (std::size_t t = 0; t < m.acc_final.size(); ++t) {
        out << t << "," << fmt_real(m.acc_final[t]) << "," << fmt_real(m.running_avg[t]) << ","
            << m.routed_majority[t] << "," << m.footprint_after_task[t] << "," << m.seed << "\n";
    }
    return out.str();
}

std::string heatmap_csv(const std::vector<std::vector<real>>& grid) {
    std::ostringstream out;
    out << "task";
    if (!grid.empty()) {
        for (std::size_t e = 0; e < grid[0].size(); ++e) out << ",ae" << e;
    }
    out << "\n";
    for (std::size_t t = 0; t < grid.size(); ++t) {
        out << t;
        for (real v : grid[t]) out << "," << fmt_real(v);
        out << "\n";
    }
    return out.str();
}

std::string metrics_json(const MetricsLog& m, const ExperimentConfig& cfg) {
    nlohmann::json j;
    j["seed"] = m.seed;
    j["avg_acc"] = static_cast<double>(m.avg_acc());
    j["acc_final"] = m.acc_final;
    j["running_avg"] = m.running_avg;
    j["acc_at_finish"] = m.acc_at_finish;
    j["routing_confusion"] = m.routing_confusion;
    j["routed_majority"] = m.routed_majority;
    j["params"] = {{"lora", m.params_lora},
                   {"heads", m.params_heads},
                   {"autoencoders", m.params_ae},
                   {"trainable", m.params_trainable()}};
    j["footprint_after_task"] = m.footprint_after_task;
    j["lora_after_task"] = m.lora_after_task;
    nlohmann::json events = nlohmann::json::array();
    for (const auto& ev : m.fusion_events) {
        events.push_back({{"task", ev.task},
                          {"donor_task", ev.donor_task},
                          {"donor_slot_id", ev.donor_slot_id},
                          {"new_slot_id", ev.new_slot_id},
                          {"alpha", static_cast<double>(ev.alpha)},
                          {"replay_size", ev.replay_size},
                          {"params_before", ev.params_before},
                          {"params_after", ev.params_after}});
    }
    j["fusion_events"] = events;
    j["wall_seconds"] = m.wall_seconds;
    j["config"] = cfg.to_kv();
    return j.dump(2) + "\n";
}

void write_outputs(const RunResult& result, const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    const auto write = [&](const std::string& name, const std::string& content) {
        std::ofstream f(fs::path(out_dir) / name, std::ios::binary);
        if (!f) throw Error("cannot write " + name + " under " + out_dir);
        f << content;
    };
    write("metrics.csv", metrics_csv(result.metrics));
    write("metrics.json", metrics_json(result.metrics, result.config));
    write("heatmap.csv", heatmap_csv(result.heatmap));
    save_checkpoint(result.state, result.config, (fs::path(out_dir) / "checkpoint.rtcl").string());
}

}  // namespace rtcl
