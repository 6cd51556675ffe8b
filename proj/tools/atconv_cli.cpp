#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "atconv/ablate.hpp"
#include "atconv/analysis.hpp"
#include "atconv/bench.hpp"
#include "atconv/complexity.hpp"
#include "atconv/gradcheck.hpp"
#include "atconv/idx.hpp"
#include "atconv/micro.hpp"
#include "json.hpp"

ATCONV_INSTALL_ALLOC_HOOK

namespace {

using namespace atconv;

constexpr const char* kVersion = "0.1.0";

// Runs `write` against the file at `path`, or stdout when the path is empty or "-".
template <class Fn>
void with_output(const std::string& path, Fn&& write) {
    if (path.empty() || path == "-") {
        write(std::cout);
        std::cout.flush();
        return;
    }
    std::ofstream os(path);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    write(os);
    if (!os) throw IoError("failed writing '" + path + "'");
}

struct GradcheckArgs {
    std::uint64_t seed = 7;
    double h = 1e-3;
    std::string out;
};

int run_gradcheck(const GradcheckArgs& a) {
    const auto report = gradcheck_suite(a.seed, a.h);
    with_output(a.out, [&](std::ostream& os) { os << to_json(report).dump(2) << '\n'; });
    if (!report.pass()) {
        std::cerr << "gradcheck: max relative error " << report.max_rel_error() << " exceeds " << report.tolerance
                  << '\n';
        return 1;
    }
    return 0;
}

struct BenchArgs {
    BenchSpec spec;
    std::string out;
    std::string json;
};

int run_bench(const BenchArgs& a) {
    const auto rows = bench_run(a.spec);
    with_output(a.out, [&](std::ostream& os) { write_bench_csv(os, rows); });
    if (!a.json.empty()) {
        nlohmann::json j = nlohmann::json::array();
        for (const auto& r : rows) j.push_back(to_json(r));
        with_output(a.json, [&](std::ostream& os) { os << j.dump(2) << '\n'; });
    }
    bool any_failed = false;
    for (const auto& r : rows) {
        if (r.failed) {
            any_failed = true;
            std::cerr << "bench: " << r.op << " at H=" << r.H << " failed: " << r.error << '\n';
        }
    }
    if (!a.spec.dry_run && !alloc::hook_installed) std::cerr << "bench: measured:false (no allocation hook)\n";
    return any_failed ? 1 : 0;
}

struct AnalyzeArgs {
    std::string op = "atconv";
    std::string kernel_mod = "dkm";
    std::size_t channels = 8;
    std::size_t height = 16;
    std::size_t width = 16;
    std::size_t kernel = 3;
    long anchor_h = -1;
    long anchor_w = -1;
    double lambda = -1.0;
    std::uint64_t seed = 0;
    AnalysisOptions opt;
    std::string out;
    std::string g_csv;
    std::string d_csv;
};

int run_analyze(const AnalyzeArgs& a) {
    Rng rng(a.seed);
    std::unique_ptr<Operator<double>> op;
    if (a.op == "atconv") {
        auto cfg = ATConvConfig<double>::full();
        cfg.kernel_mod = parse_kernel_mod(a.kernel_mod);
        if (a.lambda >= 0.0) cfg.lambda_override = Vector<double>(a.channels, a.lambda);
        op = std::make_unique<ATConvOp<double>>(ATConvParams<double>::init(a.channels, a.kernel, rng), cfg);
    } else if (a.op == "identity") {
        op = std::make_unique<IdentityOp<double>>();
    } else {
        op = make_bench_operator<double>(a.op, a.channels, a.kernel, rng);
    }
    const auto x = random_tensor<double>({1, a.channels, a.height, a.width}, rng);
    const Anchor anchor{a.anchor_h < 0 ? a.height / 2 : std::size_t(a.anchor_h),
                        a.anchor_w < 0 ? a.width / 2 : std::size_t(a.anchor_w)};
    const auto report = analyze(*op, x, anchor, a.opt);
    auto j = to_json(report, a.opt);
    j["operator"] = a.op;
    j["input"] = {{"batch", 1}, {"channels", a.channels}, {"height", a.height}, {"width", a.width}, {"seed", a.seed}};
    with_output(a.out, [&](std::ostream& os) { os << j.dump(2) << '\n'; });
    if (!a.g_csv.empty()) with_output(a.g_csv, [&](std::ostream& os) { write_map_csv(os, report.influence.g); });
    if (!a.d_csv.empty()) with_output(a.d_csv, [&](std::ostream& os) { write_map_csv(os, report.inhibition); });
    return 0;
}

struct ComplexityArgs {
    ShapeSpec shape{32, 384, 28, 28, 3, 2};
    std::string dtype = "fp16";
    std::string out;
};

int run_complexity(ComplexityArgs a) {
    a.shape.elt_bytes = dtype_elt_bytes(a.dtype);
    const auto j = to_json(complexity_report(a.shape));
    with_output(a.out, [&](std::ostream& os) { os << j.dump(2) << '\n'; });
    return 0;
}

struct TrainArgs {
    MicroConfig cfg;
    TrainOptions opt;
    std::string kernel_mod = "dkm";
    std::string data = "data/digits";
    std::string out;
    std::string preset;
};

int run_presets(const std::string& which, const std::string& out) {
    std::vector<nlohmann::json> lines;
    for (const auto& s : backbone_presets()) {
        if (which != "all" && which != s.name) continue;
        lines.push_back({{"preset", s.name},
                         {"depths", s.depths},
                         {"widths", s.widths},
                         {"params", preset_param_count(s)},
                         {"params_m", double(preset_param_count(s)) / 1e6},
                         {"published_params_m", s.published_params_m}});
    }
    if (lines.empty()) throw ArgumentError("unknown preset '" + which + "'");
    with_output(out, [&](std::ostream& os) {
        for (const auto& l : lines) os << l.dump() << '\n';
    });
    return 0;
}

int run_train(TrainArgs a) {
    if (!a.preset.empty()) return run_presets(a.preset, a.out);
    a.cfg.kernel_mod = parse_kernel_mod(a.kernel_mod);
    a.cfg.validate();
    const auto train_set = load_idx(a.data + "/train-images-idx3-ubyte", a.data + "/train-labels-idx1-ubyte");
    const auto test_set = load_idx(a.data + "/t10k-images-idx3-ubyte", a.data + "/t10k-labels-idx1-ubyte");
    if (train_set.rows != a.cfg.image || train_set.cols != a.cfg.image) {
        throw ConsistencyError("images are " + std::to_string(train_set.rows) + "x" + std::to_string(train_set.cols) +
                               " but the model expects " + std::to_string(a.cfg.image));
    }
    Rng rng(a.opt.seed);
    auto p = MicroParams<float>::init(a.cfg, rng);
    std::ofstream file;
    std::ostream* os = &std::cout;
    if (!a.out.empty() && a.out != "-") {
        file.open(a.out);
        if (!file) throw IoError("cannot open '" + a.out + "' for writing");
        os = &file;
    }
    train(p, a.cfg, train_set, &test_set, a.opt, [&](const EpochMetrics& m) {
        *os << nlohmann::json{{"epoch", m.epoch},
                              {"train_loss", m.train_loss},
                              {"train_acc", m.train_acc},
                              {"test_acc", m.test_acc},
                              {"wall_ms", m.wall_ms}}
                   .dump()
            << std::endl;
    });
    return 0;
}

struct AblateArgs {
    AblateSpec spec;
    std::string out;
};

int run_ablate(const AblateArgs& a) {
    const auto rows = ablate_run(a.spec);
    with_output(a.out, [&](std::ostream& os) { write_ablate_csv(os, rows); });
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"ATConv operator toolkit"};
    app.require_subcommand(1);

    GradcheckArgs gc;
    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every backward pass (JSON)");
    gradcheck->add_option("--seed", gc.seed, "random seed");
    gradcheck->add_option("--step", gc.h, "finite-difference step h")->check(CLI::PositiveNumber);
    gradcheck->add_option("--out", gc.out, "output path (default stdout)");

    BenchArgs bn;
    auto* bench = app.add_subcommand("bench", "latency and peak-memory scaling (CSV)");
    bench->add_option("--operators", bn.spec.operators, "atconv, toy_sa, static_dwconv, static_conv")->delimiter(',');
    bench->add_option("--batch", bn.spec.batch, "batch size");
    bench->add_option("--channels", bn.spec.channels, "channels");
    bench->add_option("--kernel", bn.spec.kernel, "kernel size");
    bench->add_option("--resolutions", bn.spec.resolutions, "ascending H = W list")->delimiter(',');
    bench->add_option("--reps", bn.spec.reps, "timed repetitions (>= 3)");
    bench->add_option("--warmup", bn.spec.warmup, "discarded warmup runs");
    bench->add_option("--dtype", bn.spec.dtype, "f32 or f64");
    bench->add_option("--seed", bn.spec.seed, "random seed");
    bench->add_flag("--dry-run", bn.spec.dry_run, "skip execution; latency = modelled FLOPs at 1 GFLOP/s");
    bench->add_option("--out", bn.out, "CSV path (default stdout)");
    bench->add_option("--json", bn.json, "also write rows as JSON");

    AnalyzeArgs an;
    auto* analyze_cmd = app.add_subcommand("analyze", "influence map, FAR, centroid, inhibition, CSC, CER (JSON)");
    analyze_cmd->add_option("--operator", an.op, "atconv, toy_sa, static_dwconv, static_conv, identity");
    analyze_cmd->add_option("--kernel-mod", an.kernel_mod, "none, softmax, central_diff, dkm (atconv only)");
    analyze_cmd->add_option("--lambda", an.lambda, "pin every lambda_c (atconv only)");
    analyze_cmd->add_option("--channels", an.channels, "channels");
    analyze_cmd->add_option("--height", an.height, "input height");
    analyze_cmd->add_option("--width", an.width, "input width");
    analyze_cmd->add_option("--kernel", an.kernel, "kernel size");
    analyze_cmd->add_option("--anchor-h", an.anchor_h, "anchor row (default centre)");
    analyze_cmd->add_option("--anchor-w", an.anchor_w, "anchor column (default centre)");
    analyze_cmd->add_option("--r0", an.opt.r0, "FAR radius");
    analyze_cmd->add_option("--quantile", an.opt.quantile, "centroid threshold quantile");
    analyze_cmd->add_option("--sigma", an.opt.sigma, "CSC blur sigma");
    analyze_cmd->add_option("--eps-rel", an.opt.eps_rel, "inhibition perturbation relative to RMS(x)");
    analyze_cmd->add_option("--seed", an.seed, "random seed");
    analyze_cmd->add_option("--out", an.out, "JSON path (default stdout)");
    analyze_cmd->add_option("--g-csv", an.g_csv, "write the influence map as h,w,value");
    analyze_cmd->add_option("--d-csv", an.d_csv, "write the inhibition map as h,w,value");

    ComplexityArgs cx;
    auto* complexity = app.add_subcommand("complexity", "analytic FLOPs and activation memory (JSON)");
    complexity->add_option("--batch", cx.shape.batch, "batch size");
    complexity->add_option("--channels", cx.shape.channels, "channels");
    complexity->add_option("--height", cx.shape.height, "height");
    complexity->add_option("--width", cx.shape.width, "width");
    complexity->add_option("--kernel", cx.shape.kernel, "kernel size");
    complexity->add_option("--dtype", cx.dtype, "fp16, fp32 or fp64");
    complexity->add_option("--out", cx.out, "JSON path (default stdout)");

    TrainArgs tr;
    auto* train_cmd = app.add_subcommand("train", "train the micro classifier on IDX digits (JSONL per epoch)");
    train_cmd->add_option("--data", tr.data, "directory holding the four IDX files");
    train_cmd->add_option("--epochs", tr.opt.epochs, "epochs");
    train_cmd->add_option("--batch", tr.opt.batch, "batch size");
    train_cmd->add_option("--lr", tr.opt.adam.lr, "learning rate");
    train_cmd->add_option("--weight-decay", tr.opt.adam.weight_decay, "decoupled weight decay");
    train_cmd->add_option("--seed", tr.opt.seed, "random seed");
    train_cmd->add_option("--channels", tr.cfg.channels, "channels");
    train_cmd->add_option("--blocks", tr.cfg.blocks, "blocks");
    train_cmd->add_option("--kernel", tr.cfg.kernel, "ATConv kernel size");
    train_cmd->add_option("--patch", tr.cfg.patch, "stem stride");
    train_cmd->add_option("--stem-kernel", tr.cfg.stem_kernel, "stem kernel size");
    train_cmd->add_option("--kernel-mod", tr.kernel_mod, "none, softmax, central_diff, dkm");
    train_cmd->add_option("--stop-at", tr.opt.stop_at_accuracy, "stop once test accuracy reaches this");
    train_cmd->add_option("--checkpoint", tr.opt.checkpoint, "ATCK checkpoint written after every epoch")
        ->default_val("micro.atck");
    train_cmd->add_option("--out", tr.out, "JSONL path (default stdout)");
    train_cmd->add_option("--preset", tr.preset, "print parameter counts of a backbone preset (or 'all') and exit");

    AblateArgs ab;
    auto* ablate = app.add_subcommand("ablate", "walk the DWConv to ATConv roadmap (CSV)");
    ablate->add_option("--batch", ab.spec.batch, "batch size");
    ablate->add_option("--channels", ab.spec.channels, "channels");
    ablate->add_option("--resolution", ab.spec.resolution, "H = W");
    ablate->add_option("--kernel", ab.spec.kernel, "kernel size");
    ablate->add_option("--reps", ab.spec.reps, "timed forward passes");
    ablate->add_option("--probe-steps", ab.spec.probe_steps, "softmax-stage probe length (0 disables)");
    ablate->add_option("--seed", ab.spec.seed, "random seed");
    ablate->add_option("--out", ab.out, "CSV path (default stdout)");

    auto* version = app.add_subcommand("version", "print the version");

    if (argc <= 1) {
        std::cerr << app.help();
        return 2;
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*gradcheck) return run_gradcheck(gc);
        if (*bench) return run_bench(bn);
        if (*analyze_cmd) return run_analyze(an);
        if (*complexity) return run_complexity(cx);
        if (*train_cmd) return run_train(tr);
        if (*ablate) return run_ablate(ab);
        if (*version) {
            std::cout << "atconv " << kVersion << '\n';
            return 0;
        }
    } catch (const ArgumentError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 2;
}
