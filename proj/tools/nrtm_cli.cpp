// nrtm: generate data, train, evaluate, predict, benchmark, invert, build LUTs.
//
// Exit codes: 0 ok, 2 config/usage, 3 IO, 4 numerical abort.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "nrtm/bench.hpp"
#include "nrtm/config.hpp"
#include "nrtm/emulator.hpp"
#include "nrtm/io.hpp"
#include "nrtm/lut.hpp"
#include "nrtm/retrieval.hpp"
#include "nrtm/sampling.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace nrtm;

namespace {

enum Exit { kOk = 0, kInternal = 1, kUsage = 2, kIo = 3, kNumerical = 4 };

struct Common {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out = ".";
    std::vector<std::string> sets;
    bool quiet = false;

    RunConfig resolve() const {
        json file;
        if (!config_path.empty()) {
            try {
                file = json::parse(read_file(config_path));
            } catch (const json::parse_error& e) {
                throw ConfigError(config_path + ": JSON parse error at byte " + std::to_string(e.byte));
            }
        }
        std::vector<std::string> o = sets;
        if (seed) o.push_back("seed=" + std::to_string(*seed));
        return resolve_config(file, o);
    }
    fs::path path(const std::string& name) const { return fs::path(out) / name; }
};

void log(const Common& c, const std::string& msg) {
    if (!c.quiet) std::cerr << msg << '\n';
}

void write_json(const fs::path& p, const json& j) { write_file(p, j.dump(2) + "\n"); }

/// Output artifact header: config echo and seed.
json artifact(const RunConfig& cfg) { return {{"config", to_json(cfg)}, {"seed", cfg.seed}}; }

std::ifstream open_in(const std::string& p) {
    std::ifstream in(p);
    if (!in) throw IoError("cannot open " + p);
    return in;
}

// ---------------------------------------------------------------- gen

int cmd_gen(const Common& c) {
    const RunConfig cfg = c.resolve();
    const WavelengthGrid grid = cfg.sampling.grid();
    const Eigen::MatrixXd X =
        sample_states(cfg.sampling.ranges, cfg.sampling.n, grid.k(), cfg.sampling.method, derive_seed(cfg.seed, 10));
    SpectralDataset ds = generate_dataset(X, grid, cfg.oracle, cfg.sampling.fractions, derive_seed(cfg.seed, 11));
    ds.ranges = cfg.sampling.ranges;
    ds.method = cfg.sampling.method;
    save_dataset(c.path("dataset"), ds, artifact(cfg));
    log(c, "wrote " + c.path("dataset.csv").string() + " (" + std::to_string(ds.n()) + " rows, k=" +
               std::to_string(ds.k()) + ")");
    return kOk;
}

// ---------------------------------------------------------------- train

int cmd_train(const Common& c, const std::string& data) {
    const RunConfig cfg = c.resolve();
    const SpectralDataset ds = load_dataset(data);
    const EmulatorOptions opts = cfg.emulator_options();
    EmulatorModel F = train_emulator(ds, opts, [&](std::size_t i, const TrainReport& r) {
        std::ostringstream s;
        s << "channel " << i << ": epochs " << r.epochs_run << ", val nMAE " << r.best_val_nmae
          << (r.converged ? "" : " (not converged)");
        log(c, s.str());
    });
    F.meta = artifact(cfg);
    F.meta["dataset_seed"] = ds.seed;
    write_file(c.path("model.json"), save(F) + "\n");
    // wall-clock lives apart from the model and metrics so those stay reproducible
    json timing = {{"channel_seconds", json::array()}, {"total_seconds", 0.0}};
    for (const auto& r : F.reports) {
        timing["channel_seconds"].push_back(r.seconds);
        timing["total_seconds"] = timing["total_seconds"].get<double>() + r.seconds;
    }
    write_json(c.path("timing.json"), timing);

    json metrics = artifact(cfg);
    json channels = json::array();
    std::size_t unconverged = 0;
    for (std::size_t i = 0; i < F.reports.size(); ++i) {
        const TrainReport& r = F.reports[i];
        unconverged += r.converged ? 0 : 1;
        channels.push_back({{"channel", i},
                            {"lambda", F.grid[i]},
                            {"epochs", r.epochs_run},
                            {"best_epoch", r.best_epoch},
                            {"converged", r.converged},
                            {"hit_max_epochs", r.epochs_run >= opts.train.max_epochs},
                            {"val_nmae", r.best_val_nmae}});
    }
    metrics["channels"] = channels;
    metrics["unconverged_channels"] = unconverged;
    metrics["val"] = to_json(evaluate(F, ds, Split::val));
    metrics["test"] = to_json(evaluate(F, ds, Split::test));
    write_json(c.path("train_metrics.json"), metrics);
    log(c, "test nMAE " + format_double(metrics["test"]["overall_nmae"].get<double>()));
    return kOk;
}

// ---------------------------------------------------------------- eval

int cmd_eval(const Common& c, const std::string& model, const std::string& data, const std::string& split_name,
             std::size_t sample) {
    const RunConfig cfg = c.resolve();
    const EmulatorModel F = load_emulator(read_file(model));
    const SpectralDataset ds = load_dataset(data);
    if (!(ds.grid == F.grid)) throw ConfigError("model and dataset wavelength grids differ");
    const Split split = parse_split(split_name);
    const auto rows = ds.rows(split);
    if (rows.empty()) throw ConfigError("split '" + split_name + "' is empty");
    if (sample >= rows.size())
        throw ConfigError("--sample " + std::to_string(sample) + " out of range for " + std::to_string(rows.size()) +
                          " rows");

    json out = artifact(cfg);
    out["split"] = split_name;
    out["metrics"] = to_json(evaluate(F, ds, split));
    write_json(c.path("eval_metrics.json"), out);

    const std::size_t row = rows[sample];
    const auto pred = predict_spectrum(F, ds.state(row), ds.surface(row));
    std::ostringstream csv;
    csv << "lambda,truth,predicted\n";
    for (std::size_t i = 0; i < ds.k(); ++i)
        csv << format_double(ds.grid[i]) << ',' << format_double(ds.Y(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(i)))
            << ',' << format_double(pred[i]) << '\n';
    write_file(c.path("spectrum.csv"), csv.str());
    log(c, split_name + " nMAE " + format_double(out["metrics"]["overall_nmae"].get<double>()));
    return kOk;
}

// ---------------------------------------------------------------- predict

int cmd_predict(const Common& c, const std::string& model, const std::string& input) {
    const RunConfig cfg = c.resolve();
    const EmulatorModel F = load_emulator(read_file(model));
    auto in = open_in(input);
    const Eigen::MatrixXd X = read_states_csv(in, F.k());
    const Eigen::MatrixXd Y = predict_batch(F, X);
    std::ostringstream csv;
    write_spectra_csv(csv, Y);
    write_file(c.path("predictions.csv"), csv.str());
    json side = artifact(cfg);
    side["rows"] = X.rows();
    side["k"] = F.k();
    write_json(c.path("predictions.json"), side);
    return kOk;
}

// ---------------------------------------------------------------- bench

int cmd_bench(const Common& c, const std::string& model, const std::string& data, const std::string& lut_path) {
    const RunConfig cfg = c.resolve();
    const EmulatorModel F = load_emulator(read_file(model));
    const SpectralDataset ds = load_dataset(data);
    if (!(ds.grid == F.grid)) throw ConfigError("model and dataset wavelength grids differ");

    std::vector<std::size_t> holdout = ds.rows(Split::test);
    const auto val = ds.rows(Split::val);
    holdout.insert(holdout.end(), val.begin(), val.end());
    if (holdout.size() < cfg.bench.queries)
        throw ConfigError("dataset has " + std::to_string(holdout.size()) + " held-out rows, bench.queries is " +
                          std::to_string(cfg.bench.queries));
    holdout.resize(cfg.bench.queries);
    const Eigen::MatrixXd Q = gather_rows(ds.X, holdout);

    using clock = std::chrono::steady_clock;
    const std::size_t q = matched_knots(ds.rows(Split::train).size());
    const auto t0 = clock::now();
    const LutBuild matched = build_lut(ds.ranges, {q, q, q, q, q}, ds.grid, ds.oracle, cfg.lut.cap_bytes);
    const double matched_s = std::chrono::duration<double>(clock::now() - t0).count();

    LookupTable dense;
    double dense_s = 0.0;
    if (!lut_path.empty()) {
        std::ifstream in(lut_path, std::ios::binary);
        if (!in) throw IoError("cannot open " + lut_path);
        dense = read_lut(in);
    } else {
        const auto t1 = clock::now();
        dense = build_lut(ds.ranges, cfg.lut.knots, ds.grid, ds.oracle, cfg.lut.cap_bytes).table;
        dense_s = std::chrono::duration<double>(clock::now() - t1).count();
    }

    double train_s = 0.0;
    const fs::path timing = fs::path(model).parent_path() / "timing.json";
    if (fs::exists(timing)) train_s = read_json_file(timing).value("total_seconds", 0.0);
    std::vector<BenchEngine> engines;
    engines.push_back(oracle_engine(ds.grid, ds.oracle, cfg.bench.quadrature_depth));
    engines.push_back(emulator_engine(F, train_s, ds.rows(Split::train).size()));
    engines.push_back(lut_engine("lut_matched_" + std::to_string(q), matched.table, matched_s));
    engines.push_back(lut_engine("lut_dense", dense, dense_s));

    BenchReport rep = run_bench(Q, engines, cfg.bench.repeats, cfg.seed);
    rep.config = to_json(cfg);
    json j = to_json(rep);
    j["seed"] = cfg.seed;
    write_json(c.path("bench.json"), j);
    std::ostringstream csv;
    write_bench_csv(csv, rep);
    write_file(c.path("bench.csv"), csv.str());
    for (const auto& e : rep.engines) {
        std::ostringstream s;
        if (e.ok)
            s << e.name << ": " << e.queries_per_second << " queries/s, nMAE " << e.nmae;
        else
            s << e.name << ": failed: " << e.error;
        log(c, s.str());
    }
    return kOk;
}

// ---------------------------------------------------------------- invert

int cmd_invert(const Common& c, const std::string& model, const std::string& spectra) {
    const RunConfig cfg = c.resolve();
    const EmulatorModel F = load_emulator(read_file(model));
    auto in = open_in(spectra);
    const CsvTable t = read_csv(in);
    const std::size_t k = count_indexed(t, "y_");
    if (k != F.k()) throw ConfigError("spectra CSV has " + std::to_string(k) + " channels, model has " + std::to_string(F.k()));
    const Eigen::MatrixXd Y = csv_block(t, "y_", k);
    const bool joint = cfg.retrieval_mode == RetrievalMode::joint;
    std::array<std::size_t, kAtmParams> atm_cols{};
    if (!joint)
        for (std::size_t a = 0; a < kAtmParams; ++a) atm_cols[a] = t.column(AtmosphericState::kNames[a]);

    std::ostringstream csv;
    csv << "row,converged,iterations,residual_norm";
    if (joint)
        for (const char* n : AtmosphericState::kNames) csv << ',' << n;
    for (std::size_t i = 0; i < k; ++i) csv << ",rho_s_" << i;
    if (!joint) csv << ",failed_channels,clamped_channels";
    csv << '\n';

    std::vector<double> residuals;
    std::size_t converged = 0, failed_channels = 0, clamped_channels = 0;
    for (Eigen::Index r = 0; r < Y.rows(); ++r) {
        std::vector<double> y(k);
        for (std::size_t i = 0; i < k; ++i) y[i] = Y(r, static_cast<Eigen::Index>(i));
        RetrievalConfig rc = cfg.retrieval;
        rc.noise_seed = derive_seed(cfg.retrieval.noise_seed, static_cast<std::uint64_t>(r));
        RetrievalResult res;
        std::size_t nf = 0, nc = 0;
        if (joint) {
            res = invert_joint(y, F, rc);
        } else {
            std::array<double, kAtmParams> a{};
            for (std::size_t p = 0; p < kAtmParams; ++p) a[p] = t.number(static_cast<std::size_t>(r), atm_cols[p]);
            res = invert_reflectance(y, AtmosphericState::from_array(a), F, rc);
            for (auto s : res.channel_status) {
                nf += s == ChannelStatus::failed;
                nc += s == ChannelStatus::clamped_low || s == ChannelStatus::clamped_high;
            }
        }
        failed_channels += nf;
        clamped_channels += nc;
        converged += res.converged;
        residuals.push_back(res.residual_norm);
        csv << r << ',' << (res.converged ? 1 : 0) << ',' << res.iterations << ',' << format_double(res.residual_norm);
        if (joint)
            for (double v : res.state_hat->to_array()) csv << ',' << format_double(v);
        for (double v : res.rho_s_hat) csv << ',' << format_double(v);
        if (!joint) csv << ',' << nf << ',' << nc;
        csv << '\n';
    }
    write_file(c.path("retrieval.csv"), csv.str());

    json summary = artifact(cfg);
    summary["mode"] = to_string(cfg.retrieval_mode);
    summary["spectra"] = Y.rows();
    summary["converged"] = converged;
    summary["convergence_rate"] = Y.rows() ? static_cast<double>(converged) / static_cast<double>(Y.rows()) : 0.0;
    if (!residuals.empty()) {
        std::vector<double> s = residuals;
        std::sort(s.begin(), s.end());
        double sum = 0.0;
        for (double v : s) sum += v;
        summary["residual_norm"] = {{"min", s.front()},
                                    {"median", s[s.size() / 2]},
                                    {"max", s.back()},
                                    {"mean", sum / static_cast<double>(s.size())}};
    }
    if (!joint) {
        summary["failed_channels"] = failed_channels;
        summary["clamped_channels"] = clamped_channels;
    }
    write_json(c.path("retrieval.json"), summary);
    log(c, "inverted " + std::to_string(Y.rows()) + " spectra, " + std::to_string(converged) + " converged");
    return kOk;
}

// ---------------------------------------------------------------- lut

int cmd_lut(const Common& c) {
    const RunConfig cfg = c.resolve();
    const LutBuild b = build_lut(cfg.sampling.ranges, cfg.lut.knots, cfg.sampling.grid(), cfg.oracle, cfg.lut.cap_bytes);
    std::ostringstream bin(std::ios::binary);
    write_lut(bin, b.table);
    write_file(c.path("lut.bin"), bin.str());
    json side = artifact(cfg);
    side["knots"] = cfg.lut.knots;
    side["oracle_spectra"] = b.oracle_spectra;
    side["bytes"] = b.bytes;
    write_json(c.path("lut.json"), side);
    log(c, "wrote " + c.path("lut.bin").string() + " (" + std::to_string(b.bytes) + " bytes)");
    return kOk;
}

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("--config", c.config_path, "JSON run configuration");
    sub->add_option("--seed", c.seed, "global 64-bit seed (overrides the config)");
    sub->add_option("--out", c.out, "output directory")->capture_default_str();
    sub->add_option("--set", c.sets, "override, section.key=value (repeatable)");
    sub->add_flag("-q,--quiet", c.quiet, "no progress output");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Per-channel neural RTM emulator: data, training, evaluation, retrieval, benchmarks"};
    app.require_subcommand(1);
    Common common;
    std::string model, data, input, split = "test", lut_path;
    std::size_t sample = 0;

    auto* gen = app.add_subcommand("gen", "sample states and write a dataset");
    add_common(gen, common);

    auto* train = app.add_subcommand("train", "train the per-channel emulator");
    add_common(train, common);
    train->add_option("--data", data, "dataset CSV")->required();

    auto* eval = app.add_subcommand("eval", "metrics and a truth/prediction spectrum");
    add_common(eval, common);
    eval->add_option("--model", model, "emulator JSON")->required();
    eval->add_option("--data", data, "dataset CSV")->required();
    eval->add_option("--split", split, "train, val or test")->capture_default_str();
    eval->add_option("--sample", sample, "row within the split for spectrum.csv")->capture_default_str();

    auto* predict = app.add_subcommand("predict", "emulate spectra for input states");
    add_common(predict, common);
    predict->add_option("--model", model, "emulator JSON")->required();
    predict->add_option("--input", input, "CSV with mu0,tau550,alpha,wvap,rho_s_0..")->required();

    auto* bench = app.add_subcommand("bench", "time oracle, emulator and LUT");
    add_common(bench, common);
    bench->add_option("--model", model, "emulator JSON")->required();
    bench->add_option("--data", data, "dataset CSV (held-out rows are the queries)")->required();
    bench->add_option("--lut", lut_path, "prebuilt LUT file; built from the config if absent");

    auto* invert = app.add_subcommand("invert", "retrieve surface reflectance from spectra");
    add_common(invert, common);
    invert->add_option("--model", model, "emulator JSON")->required();
    invert->add_option("--spectra", input, "CSV with y_0..y_{k-1} (and the atmosphere for known mode)")->required();

    auto* lut = app.add_subcommand("lut", "build and save a lookup table");
    add_common(lut, common);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kUsage;
    }

    try {
        if (*gen) return cmd_gen(common);
        if (*train) return cmd_train(common, data);
        if (*eval) return cmd_eval(common, model, data, split, sample);
        if (*predict) return cmd_predict(common, model, input);
        if (*bench) return cmd_bench(common, model, data, lut_path);
        if (*invert) return cmd_invert(common, model, input);
        if (*lut) return cmd_lut(common);
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << '\n';
        return kIo;
    } catch (const ParseError& e) {
        std::cerr << "io error: " << e.what() << '\n';
        return kIo;
    } catch (const NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << '\n';
        return kNumerical;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << '\n';
        return kInternal;
    }
    return kUsage;
}
