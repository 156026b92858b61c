// Command-line surface for the synthetic-shapes pipeline: dataset
// generation, backbone and stream training, saliency rendering, metric
// evaluation, and the stream-design ablation grid. Every command prints its
// fully-resolved configuration as the first stdout line and never writes
// outside --out, so reruns with the same --seed are byte-comparable.
//
// Exit codes: 0 ok, 2 usage, 3 io, 4 numeric divergence, 5 invariant
// violation. CASTREAM_THREADS bounds the eval worker pool; every other
// command runs single-threaded.
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "castream/castream.hpp"

namespace {

using nlohmann::json;
using namespace castream;

std::string json_scalar(const json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    return v.dump();
}

// --config escape hatch: a flat JSON object whose keys mirror the invoked
// command's long flags. Applied after flag parsing, so explicit flags win;
// required flags may come from either place. Must run before any work.
void apply_config(CLI::App* sub, const std::string& path) {
    if (path.empty()) return;
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open config '" + path + "'");
    json j;
    try {
        f >> j;
    } catch (const json::parse_error& e) {
        throw DomainError("config '" + path +
                          "' is not valid JSON: " + e.what());
    }
    if (!j.is_object())
        throw DomainError("config '" + path + "': root must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        CLI::Option* opt = nullptr;
        try {
            opt = sub->get_option("--" + key);
        } catch (const CLI::OptionNotFound&) {
            throw DomainError("config '" + path + "': '" + key +
                              "' is not a flag of " + sub->get_name());
        }
        if (opt->count() > 0) continue;
        if (value.is_array())
            for (const auto& v : value) opt->add_result(json_scalar(v));
        else
            opt->add_result(json_scalar(value));
        opt->run_callback();
    }
}

// Required-if-absent flags are validated here instead of CLI11's required()
// so the --config file can supply them too.
void require_value(const std::string& v, const char* flag, const char* cmd) {
    if (v.empty())
        throw DomainError(std::string(cmd) + ": " + flag +
                          " is required (flag or config)");
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == ',') {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else if (c != ' ') {
            cur += c;
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

std::vector<std::int64_t> parse_int_list(const std::string& s,
                                         const char* what) {
    std::vector<std::int64_t> out;
    for (const auto& tok : split_list(s)) {
        std::size_t used = 0;
        std::int64_t v = 0;
        try {
            v = std::stoll(tok, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != tok.size())
            throw DomainError(std::string(what) + ": '" + tok +
                              "' is not an integer");
        out.push_back(v);
    }
    if (out.empty()) throw DomainError(std::string(what) + ": empty list");
    return out;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!f) throw IoError("short write to " + path.string());
}

// First stdout line: the command's resolved flags, defaults included, as
// compact JSON with sorted keys. Reruns diff cleanly against it.
void print_resolved(const json& cfg) { std::cout << cfg.dump() << "\n"; }

OptimizerConfig make_optimizer(double lr, double momentum, double wd,
                               std::int64_t epochs, std::int64_t batch,
                               std::uint64_t seed) {
    OptimizerConfig oc;
    oc.lr0 = lr;
    oc.momentum = momentum;
    oc.weight_decay = wd;
    oc.epochs = epochs;
    oc.batch_size = batch;
    oc.seed = seed;
    return oc;
}

// ---- gen-data ----

struct GenOpts {
    std::int64_t n = 512;
    std::uint64_t seed = 1;
    std::string out, config;
};

void run_gen(const GenOpts& o) {
    require_value(o.out, "--out", "gen-data");
    print_resolved(
        {{"command", "gen-data"}, {"n", o.n}, {"out", o.out}, {"seed", o.seed}});
    save_dataset(o.out, generate_dataset(o.n, o.seed), o.seed);
    std::cout << "wrote," << o.n << "\n";
}

// ---- train-backbone ----

struct TrainBackboneOpts {
    std::string data, out, val, config;
    std::string widths = "8,16,32,64";
    std::int64_t blocks = 2, epochs = 30, batch = 64;
    double lr = 0.1, momentum = 0.9, weight_decay = 1e-4;
    std::uint64_t seed = 1;
};

void run_train_backbone(const TrainBackboneOpts& o) {
    require_value(o.data, "--data", "train-backbone");
    require_value(o.out, "--out", "train-backbone");
    print_resolved({{"command", "train-backbone"},
                    {"data", o.data},
                    {"out", o.out},
                    {"val", o.val},
                    {"widths", o.widths},
                    {"blocks", o.blocks},
                    {"epochs", o.epochs},
                    {"batch", o.batch},
                    {"lr", o.lr},
                    {"momentum", o.momentum},
                    {"weight-decay", o.weight_decay},
                    {"seed", o.seed}});
    auto train_set = load_dataset(o.data);

    BackboneConfig bc;
    bc.input_channels = data::kChannels;
    bc.input_size = data::kWidth;
    bc.class_count = data::kClassCount;
    bc.widths = parse_int_list(o.widths, "--widths");
    bc.blocks_per_stage = o.blocks;
    bc.seed = o.seed;

    StagedBackbone<float> bb(bc);
    auto history = train_backbone(
        bb, train_set,
        make_optimizer(o.lr, o.momentum, o.weight_decay, o.epochs, o.batch,
                       o.seed));
    std::cout << history_csv(history);

    Model<float> model{std::move(bb), std::nullopt};
    if (!o.val.empty())
        std::cout << "val_accuracy,"
                  << format_fixed(accuracy(model, Pooling::gap,
                                           load_dataset(o.val)))
                  << "\n";
    save_model(o.out, model);
}

// ---- train-stream ----

struct TrainStreamOpts {
    std::string backbone, data, out, val, config;
    std::string variant = "vanilla", class_mode = "agnostic";
    int start_stage = 0;
    std::int64_t epochs = 15, batch = 64;
    double lr = 0.05, momentum = 0.9, weight_decay = 1e-4;
    std::uint64_t seed = 1, stream_seed = 77;
};

void run_train_stream(const TrainStreamOpts& o) {
    require_value(o.backbone, "--backbone", "train-stream");
    require_value(o.data, "--data", "train-stream");
    require_value(o.out, "--out", "train-stream");
    print_resolved({{"command", "train-stream"},
                    {"backbone", o.backbone},
                    {"data", o.data},
                    {"out", o.out},
                    {"val", o.val},
                    {"variant", o.variant},
                    {"start-stage", o.start_stage},
                    {"class-mode", o.class_mode},
                    {"epochs", o.epochs},
                    {"batch", o.batch},
                    {"lr", o.lr},
                    {"momentum", o.momentum},
                    {"weight-decay", o.weight_decay},
                    {"seed", o.seed},
                    {"stream-seed", o.stream_seed}});
    Model<float> model = load_model<float>(o.backbone);
    model.backbone.freeze();

    StreamConfig sc;
    sc.variant = parse_variant(o.variant);
    sc.start_stage = o.start_stage;
    sc.mode = parse_class_mode(o.class_mode);
    sc.seed = o.stream_seed;
    model.stream.emplace(model.backbone.stages(),
                         model.backbone.config().class_count, sc);

    auto train_set = load_dataset(o.data);
    auto history = train_stream(
        model, train_set,
        make_optimizer(o.lr, o.momentum, o.weight_decay, o.epochs, o.batch,
                       o.seed));
    std::cout << history_csv(history);

    if (!o.val.empty()) {
        auto val_set = load_dataset(o.val);
        std::cout << "val_accuracy_ca,"
                  << format_fixed(accuracy(model, Pooling::ca, val_set))
                  << "\n";
        std::cout << "val_accuracy_gap,"
                  << format_fixed(accuracy(model, Pooling::gap, val_set))
                  << "\n";
    }
    save_model(o.out, model);
}

// ---- explain ----

struct ExplainOpts {
    std::string model, image, out, config;
    std::string method = "gradcam", pooling = "gap";
    int stage = -1;
    std::int64_t class_id = -1;
};

void run_explain(const ExplainOpts& o) {
    require_value(o.model, "--model", "explain");
    require_value(o.image, "--image", "explain");
    require_value(o.out, "--out", "explain");
    print_resolved({{"command", "explain"},
                    {"model", o.model},
                    {"image", o.image},
                    {"out", o.out},
                    {"method", o.method},
                    {"pooling", o.pooling},
                    {"stage", o.stage},
                    {"class", o.class_id}});
    Method method = parse_method(o.method);
    Pooling pooling = parse_pooling(o.pooling);
    if (method == Method::rawattention && o.class_id >= 0)
        std::cerr << "castream: warning: rawattention is class-agnostic; "
                     "ignoring --class\n";

    Model<float> model = load_model<float>(o.model);
    PnmImage pnm = read_pnm(o.image);
    const auto& bc = model.backbone.config();
    if (pnm.channels != bc.input_channels || pnm.width != bc.input_size ||
        pnm.height != bc.input_size)
        throw DomainError("explain: image is " + std::to_string(pnm.width) +
                          "x" + std::to_string(pnm.height) + "x" +
                          std::to_string(pnm.channels) +
                          " but the model expects " +
                          std::to_string(bc.input_size) + "x" +
                          std::to_string(bc.input_size) + "x" +
                          std::to_string(bc.input_channels));
    auto input = image_tensor<float>(pnm);

    int stage = o.stage < 0
                    ? static_cast<int>(model.backbone.stages().size()) - 1
                    : o.stage;
    std::optional<std::int64_t> cls;
    if (o.class_id >= 0 && method != Method::rawattention) cls = o.class_id;
    auto map = compute_saliency(method, model, pooling, input, cls, stage);

    auto mask = saliency_mask(map, pnm.height, pnm.width);
    std::vector<std::uint8_t> gray(mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i)
        gray[i] = quantize_unit(static_cast<double>(mask[i]));

    std::filesystem::create_directories(o.out);
    std::filesystem::path dir(o.out);
    write_pgm((dir / "saliency.pgm").string(), pnm.width, pnm.height, gray);
    write_ppm((dir / "overlay.ppm").string(), pnm.width, pnm.height,
              overlay_bytes(input, mask, pnm.height, pnm.width));
    std::cout << "explained_class," << map.class_id << "\n";
    std::cout << "stage," << map.stage << "\n";
}

// ---- eval ----

struct EvalOpts {
    std::string model, data, out, config;
    std::string methods = "gradcam", poolings = "gap";
    int stage = -1;
    double step_fraction = 1.0 / 64, blur_sigma = 5.0;
    int blur_kernel = 11;
    bool no_curves = false;
};

void run_eval(const EvalOpts& o) {
    require_value(o.model, "--model", "eval");
    require_value(o.data, "--data", "eval");
    require_value(o.out, "--out", "eval");
    print_resolved({{"command", "eval"},
                    {"model", o.model},
                    {"data", o.data},
                    {"out", o.out},
                    {"methods", o.methods},
                    {"poolings", o.poolings},
                    {"stage", o.stage},
                    {"step-fraction", o.step_fraction},
                    {"blur-kernel", o.blur_kernel},
                    {"blur-sigma", o.blur_sigma},
                    {"no-curves", o.no_curves}});
    Model<float> model = load_model<float>(o.model);
    auto data_set = load_dataset(o.data);

    SuiteConfig sc;
    sc.methods.clear();
    for (const auto& m : split_list(o.methods))
        sc.methods.push_back(parse_method(m));
    sc.poolings.clear();
    for (const auto& p : split_list(o.poolings))
        sc.poolings.push_back(parse_pooling(p));
    if (sc.methods.empty() || sc.poolings.empty())
        throw DomainError("eval: --methods and --poolings must be non-empty");
    sc.protocol.step_fraction = o.step_fraction;
    sc.protocol.blur_kernel = o.blur_kernel;
    sc.protocol.blur_sigma = o.blur_sigma;
    sc.stage = o.stage;
    sc.curves = !o.no_curves;
    sc.threads = env_thread_count();

    auto cells = evaluate_suite(model, data_set, sc);
    std::filesystem::create_directories(o.out);
    std::filesystem::path dir(o.out);
    write_text(dir / "metrics.csv", metrics_csv(cells));
    write_text(dir / "samples.csv", samples_csv(cells));
    std::cout << metrics_csv(cells);
}

// ---- ablate ----

struct AblateOpts {
    std::string backbone, train, val, out, config;
    std::string variants = "vanilla,projected,mlp";
    std::string start_stages;  // empty = every stage the backbone has
    std::string class_modes = "agnostic,class_specific";
    std::int64_t epochs = 8, batch = 64;
    double lr = 0.05, momentum = 0.9, weight_decay = 1e-4;
    std::uint64_t seed = 1, stream_seed = 77;
};

void run_ablate(const AblateOpts& o) {
    require_value(o.backbone, "--backbone", "ablate");
    require_value(o.train, "--train", "ablate");
    require_value(o.val, "--val", "ablate");
    require_value(o.out, "--out", "ablate");
    print_resolved({{"command", "ablate"},
                    {"backbone", o.backbone},
                    {"train", o.train},
                    {"val", o.val},
                    {"out", o.out},
                    {"variants", o.variants},
                    {"start-stages", o.start_stages},
                    {"class-modes", o.class_modes},
                    {"epochs", o.epochs},
                    {"batch", o.batch},
                    {"lr", o.lr},
                    {"momentum", o.momentum},
                    {"weight-decay", o.weight_decay},
                    {"seed", o.seed},
                    {"stream-seed", o.stream_seed}});
    Model<float> model = load_model<float>(o.backbone);
    model.backbone.freeze();
    auto train_set = load_dataset(o.train);
    auto val_set = load_dataset(o.val);

    std::vector<CAVariant> variants;
    for (const auto& v : split_list(o.variants))
        variants.push_back(parse_variant(v));
    std::vector<ClassMode> modes;
    for (const auto& m : split_list(o.class_modes))
        modes.push_back(parse_class_mode(m));
    std::vector<int> starts;
    if (o.start_stages.empty()) {
        for (std::size_t s = 0; s < model.backbone.stages().size(); ++s)
            starts.push_back(static_cast<int>(s));
    } else {
        for (std::int64_t s : parse_int_list(o.start_stages, "--start-stages"))
            starts.push_back(static_cast<int>(s));
    }

    auto cells = ablate<float>(
        model.backbone, train_set, val_set, variants, starts, modes,
        make_optimizer(o.lr, o.momentum, o.weight_decay, o.epochs, o.batch,
                       o.seed),
        o.stream_seed);
    std::filesystem::create_directories(o.out);
    write_text(std::filesystem::path(o.out) / "ablation.csv",
               ablation_csv(cells));
    std::cout << ablation_csv(cells);
}

constexpr const char* kConfigHelp =
    "JSON file whose keys mirror this command's flags (flags win)";

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{
        "synthetic-shapes pipeline: data generation, training, saliency, "
        "and interpretability metrics"};
    app.require_subcommand(1);

    GenOpts gen;
    auto* g = app.add_subcommand("gen-data",
                                 "generate a labeled synthetic shapes dataset");
    g->add_option("--n", gen.n, "sample count")->capture_default_str();
    g->add_option("--seed", gen.seed, "rng seed")->capture_default_str();
    g->add_option("--out", gen.out, "output directory (required)");
    g->add_option("--config", gen.config, kConfigHelp);
    g->callback([&gen, g] {
        apply_config(g, gen.config);
        run_gen(gen);
    });

    TrainBackboneOpts tb;
    auto* b = app.add_subcommand("train-backbone",
                                 "train a staged convolutional classifier");
    b->add_option("--data", tb.data, "training dataset directory (required)");
    b->add_option("--out", tb.out, "checkpoint file to write (required)");
    b->add_option("--val", tb.val,
                  "validation dataset directory (reports accuracy)");
    b->add_option("--widths", tb.widths, "per-stage channel widths")
        ->capture_default_str();
    b->add_option("--blocks", tb.blocks, "residual blocks per stage")
        ->capture_default_str();
    b->add_option("--epochs", tb.epochs, "training epochs")
        ->capture_default_str();
    b->add_option("--batch", tb.batch, "batch size")->capture_default_str();
    b->add_option("--lr", tb.lr, "initial learning rate")
        ->capture_default_str();
    b->add_option("--momentum", tb.momentum, "sgd momentum")
        ->capture_default_str();
    b->add_option("--weight-decay", tb.weight_decay, "l2 penalty")
        ->capture_default_str();
    b->add_option("--seed", tb.seed, "init + shuffle seed")
        ->capture_default_str();
    b->add_option("--config", tb.config, kConfigHelp);
    b->callback([&tb, b] {
        apply_config(b, tb.config);
        run_train_backbone(tb);
    });

    TrainStreamOpts ts;
    auto* s = app.add_subcommand(
        "train-stream",
        "train an attention pooling stream on a frozen backbone");
    s->add_option("--backbone", ts.backbone, "backbone checkpoint (required)");
    s->add_option("--data", ts.data, "training dataset directory (required)");
    s->add_option("--out", ts.out, "checkpoint file to write (required)");
    s->add_option("--val", ts.val,
                  "validation dataset directory (reports accuracy)");
    s->add_option("--variant", ts.variant,
                  "stream variant: vanilla|projected|mlp|projected_mlp")
        ->capture_default_str();
    s->add_option("--start-stage", ts.start_stage,
                  "first backbone stage tapped")
        ->capture_default_str();
    s->add_option("--class-mode", ts.class_mode,
                  "query mode: agnostic|class_specific")
        ->capture_default_str();
    s->add_option("--epochs", ts.epochs, "training epochs")
        ->capture_default_str();
    s->add_option("--batch", ts.batch, "batch size")->capture_default_str();
    s->add_option("--lr", ts.lr, "initial learning rate")
        ->capture_default_str();
    s->add_option("--momentum", ts.momentum, "sgd momentum")
        ->capture_default_str();
    s->add_option("--weight-decay", ts.weight_decay, "l2 penalty")
        ->capture_default_str();
    s->add_option("--seed", ts.seed, "shuffle seed")->capture_default_str();
    s->add_option("--stream-seed", ts.stream_seed, "stream weight init seed")
        ->capture_default_str();
    s->add_option("--config", ts.config, kConfigHelp);
    s->callback([&ts, s] {
        apply_config(s, ts.config);
        run_train_stream(ts);
    });

    ExplainOpts ex;
    auto* e = app.add_subcommand(
        "explain", "render a saliency map and overlay for one image");
    e->add_option("--model", ex.model, "model checkpoint (required)");
    e->add_option("--image", ex.image, "input image, binary PPM (required)");
    e->add_option("--out", ex.out, "output directory (required)");
    e->add_option("--method", ex.method,
                  "cam|gradcam|gradcampp|scorecam|rawattention")
        ->capture_default_str();
    e->add_option("--pooling", ex.pooling, "classifier path: gap|ca")
        ->capture_default_str();
    e->add_option("--stage", ex.stage, "feature stage (-1 = last)")
        ->capture_default_str();
    e->add_option("--class", ex.class_id,
                  "class to explain (-1 = model's prediction)")
        ->capture_default_str();
    e->add_option("--config", ex.config, kConfigHelp);
    e->callback([&ex, e] {
        apply_config(e, ex.config);
        run_explain(ex);
    });

    EvalOpts ev;
    auto* v = app.add_subcommand(
        "eval", "run the interpretability metric suite over a dataset");
    v->add_option("--model", ev.model, "model checkpoint (required)");
    v->add_option("--data", ev.data,
                  "evaluation dataset directory (required)");
    v->add_option("--out", ev.out, "output directory (required)");
    v->add_option("--methods", ev.methods, "comma list of saliency methods")
        ->capture_default_str();
    v->add_option("--poolings", ev.poolings, "comma list of classifier paths")
        ->capture_default_str();
    v->add_option("--stage", ev.stage, "feature stage (-1 = last)")
        ->capture_default_str();
    v->add_option("--step-fraction", ev.step_fraction,
                  "pixel fraction per insertion/deletion step")
        ->capture_default_str();
    v->add_option("--blur-kernel", ev.blur_kernel,
                  "insertion baseline blur kernel (odd)")
        ->capture_default_str();
    v->add_option("--blur-sigma", ev.blur_sigma,
                  "insertion baseline blur sigma")
        ->capture_default_str();
    v->add_flag("--no-curves", ev.no_curves,
                "skip insertion/deletion curves (drop/gain only)");
    v->add_option("--config", ev.config, kConfigHelp);
    v->callback([&ev, v] {
        apply_config(v, ev.config);
        run_eval(ev);
    });

    AblateOpts ab;
    auto* a = app.add_subcommand(
        "ablate", "train and score a grid of stream design variants");
    a->add_option("--backbone", ab.backbone,
                  "frozen backbone checkpoint (required)");
    a->add_option("--train", ab.train, "training dataset directory (required)");
    a->add_option("--val", ab.val, "validation dataset directory (required)");
    a->add_option("--out", ab.out, "output directory (required)");
    a->add_option("--variants", ab.variants, "comma list of stream variants")
        ->capture_default_str();
    a->add_option("--start-stages", ab.start_stages,
                  "comma list of start stages (default: all)");
    a->add_option("--class-modes", ab.class_modes, "comma list of query modes")
        ->capture_default_str();
    a->add_option("--epochs", ab.epochs, "epochs per cell")
        ->capture_default_str();
    a->add_option("--batch", ab.batch, "batch size")->capture_default_str();
    a->add_option("--lr", ab.lr, "initial learning rate")
        ->capture_default_str();
    a->add_option("--momentum", ab.momentum, "sgd momentum")
        ->capture_default_str();
    a->add_option("--weight-decay", ab.weight_decay, "l2 penalty")
        ->capture_default_str();
    a->add_option("--seed", ab.seed, "shuffle seed")->capture_default_str();
    a->add_option("--stream-seed", ab.stream_seed,
                  "stream weight init seed (shared across cells)")
        ->capture_default_str();
    a->add_option("--config", ab.config, kConfigHelp);
    a->callback([&ab, a] {
        apply_config(a, ab.config);
        run_ablate(ab);
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        int rc = app.exit(err);
        return rc == 0 ? 0 : 2;
    } catch (const ShapeError& err) {
        std::cerr << "castream: usage: " << err.what() << "\n";
        return 2;
    } catch (const DomainError& err) {
        std::cerr << "castream: usage: " << err.what() << "\n";
        return 2;
    } catch (const StateError& err) {
        std::cerr << "castream: usage: " << err.what() << "\n";
        return 2;
    } catch (const IoError& err) {
        std::cerr << "castream: io: " << err.what() << "\n";
        return 3;
    } catch (const NumericError& err) {
        std::cerr << "castream: numeric: " << err.what() << "\n";
        return 4;
    } catch (const InvariantError& err) {
        std::cerr << "castream: invariant: " << err.what() << "\n";
        return 5;
    } catch (const std::filesystem::filesystem_error& err) {
        std::cerr << "castream: io: " << err.what() << "\n";
        return 3;
    } catch (const std::exception& err) {
        std::cerr << "castream: internal: " << err.what() << "\n";
        return 1;
    }
    return 0;
}
