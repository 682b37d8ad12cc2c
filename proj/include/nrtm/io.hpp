#pragma once

// Text formats: dataset CSV + JSON sidecar, spectra CSV, generic numeric CSV.
// Doubles are written in shortest round-trip form so save/load is bitwise.

#include <nlohmann/json.hpp>

#include <charconv>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "nrtm/emulator.hpp"
#include "nrtm/errors.hpp"
#include "nrtm/oracle.hpp"
#include "nrtm/sampling.hpp"

namespace nrtm {

inline std::string format_double(double v) {
    char buf[32];
    const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    if (ec != std::errc{}) throw NumericalError("cannot format double");
    return std::string(buf, end);
}

inline double parse_double(std::string_view s, const std::string& where) {
    double v = 0.0;
    const char* first = s.data();
    const char* last = s.data() + s.size();
    if (!s.empty() && *first == '+') ++first;
    const auto [end, ec] = std::from_chars(first, last, v);
    if (ec != std::errc{} || end != last) throw ParseError(where + ": not a number: '" + std::string(s) + "'");
    return v;
}

inline std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw IoError("cannot open " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    if (in.bad()) throw IoError("read failed: " + p.string());
    return ss.str();
}

inline void write_file(const std::filesystem::path& p, std::string_view content) {
    if (p.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(p.parent_path(), ec);
        if (ec) throw IoError("cannot create directory " + p.parent_path().string() + ": " + ec.message());
    }
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + p.string() + " for writing");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) throw IoError("write failed: " + p.string());
}

inline nlohmann::json read_json_file(const std::filesystem::path& p) {
    const std::string text = read_file(p);
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(p.string() + ": JSON parse error at byte " + std::to_string(e.byte));
    }
}

// ---------------------------------------------------------------- CSV

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    /// Index of a named column, or npos.
    std::size_t find(std::string_view name) const {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (header[i] == name) return i;
        return npos;
    }
    std::size_t column(std::string_view name) const {
        const std::size_t c = find(name);
        if (c == npos) throw ParseError("CSV is missing column '" + std::string(name) + "'");
        return c;
    }
    double number(std::size_t row, std::size_t col) const {
        return parse_double(rows[row][col], "CSV line " + std::to_string(row + 2) + ", column '" + header[col] + "'");
    }

    static constexpr std::size_t npos = static_cast<std::size_t>(-1);
};

namespace detail {

inline std::vector<std::string> split_csv_line(std::string_view line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t comma = line.find(',', start);
        out.emplace_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    return out;
}

}  // namespace detail

/// Plain comma-separated table with one header line. No quoting.
inline CsvTable read_csv(std::istream& in) {
    CsvTable t;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto fields = detail::split_csv_line(line);
        if (t.header.empty()) {
            t.header = std::move(fields);
            continue;
        }
        if (fields.size() != t.header.size())
            throw ParseError("CSV line " + std::to_string(lineno) + ": expected " + std::to_string(t.header.size()) +
                             " fields, got " + std::to_string(fields.size()));
        t.rows.push_back(std::move(fields));
    }
    if (in.bad()) throw IoError("CSV read failed");
    if (t.header.empty()) throw ParseError("CSV is empty");
    return t;
}

inline std::string indexed(std::string_view prefix, std::size_t i) { return std::string(prefix) + std::to_string(i); }

/// Numeric columns `prefix0 .. prefix{k-1}` as an n x k matrix.
inline Eigen::MatrixXd csv_block(const CsvTable& t, std::string_view prefix, std::size_t k) {
    Eigen::MatrixXd M(static_cast<Eigen::Index>(t.rows.size()), static_cast<Eigen::Index>(k));
    for (std::size_t c = 0; c < k; ++c) {
        const std::size_t col = t.column(indexed(prefix, c));
        for (std::size_t r = 0; r < t.rows.size(); ++r)
            M(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = t.number(r, col);
    }
    return M;
}

/// Number of consecutive `prefix0, prefix1, ...` columns present.
inline std::size_t count_indexed(const CsvTable& t, std::string_view prefix) {
    std::size_t k = 0;
    while (t.find(indexed(prefix, k)) != CsvTable::npos) ++k;
    return k;
}

// ---------------------------------------------------------------- JSON pieces

inline nlohmann::json to_json(const OracleConfig& c) {
    nlohmann::json bands = nlohmann::json::array();
    for (const auto& b : c.water_bands) bands.push_back({b.center, b.amplitude, b.sigma});
    return {{"beta_r", c.beta_r},
            {"rayleigh_exp", c.rayleigh_exp},
            {"mu_v", c.mu_v},
            {"quadrature_depth", c.quadrature_depth},
            {"water_bands", bands}};
}

inline OracleConfig oracle_config_from_json(const nlohmann::json& j) {
    OracleConfig c;
    try {
        c.beta_r = j.at("beta_r").get<double>();
        c.rayleigh_exp = j.at("rayleigh_exp").get<double>();
        c.mu_v = j.at("mu_v").get<double>();
        c.quadrature_depth = j.at("quadrature_depth").get<int>();
        c.water_bands.clear();
        for (const auto& b : j.at("water_bands")) {
            if (!b.is_array() || b.size() != 3) throw ConfigError("oracle.water_bands: expected [center, amplitude, sigma]");
            c.water_bands.push_back({b[0].get<double>(), b[1].get<double>(), b[2].get<double>()});
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("oracle: ") + e.what());
    }
    c.validate();
    return c;
}

inline nlohmann::json to_json(const SplitFractions& f) {
    return {{"train", f.train}, {"val", f.val}, {"test", f.test}};
}

inline SplitFractions split_fractions_from_json(const nlohmann::json& j) {
    SplitFractions f;
    try {
        f.train = j.at("train").get<double>();
        f.val = j.at("val").get<double>();
        f.test = j.at("test").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("fractions: ") + e.what());
    }
    f.validate();
    return f;
}

// ---------------------------------------------------------------- dataset

inline constexpr std::string_view kDatasetFormat = "nrtm-dataset";

/// Header `mu0,tau550,alpha,wvap,rho_s_0..,y_0..,split`.
inline void write_dataset_csv(std::ostream& os, const SpectralDataset& ds) {
    const std::size_t k = ds.k();
    for (std::size_t a = 0; a < kAtmParams; ++a) os << AtmosphericState::kNames[a] << ',';
    for (std::size_t i = 0; i < k; ++i) os << "rho_s_" << i << ',';
    for (std::size_t i = 0; i < k; ++i) os << "y_" << i << ',';
    os << "split\n";
    for (std::size_t r = 0; r < ds.n(); ++r) {
        const auto row = static_cast<Eigen::Index>(r);
        for (Eigen::Index c = 0; c < ds.X.cols(); ++c) os << format_double(ds.X(row, c)) << ',';
        for (Eigen::Index c = 0; c < ds.Y.cols(); ++c) os << format_double(ds.Y(row, c)) << ',';
        os << to_string(ds.split[r]) << '\n';
    }
}

inline nlohmann::json dataset_sidecar(const SpectralDataset& ds) {
    return {{"format", kDatasetFormat},
            {"version", 1},
            {"n", ds.n()},
            {"k", ds.k()},
            {"grid", ds.grid.lambdas()},
            {"scaler", to_json(ds.scaler)},
            {"seed", ds.seed},
            {"method", to_string(ds.method)},
            {"ranges", to_json(ds.ranges)},
            {"fractions", to_json(ds.fractions)},
            {"oracle", to_json(ds.oracle)}};
}

/// Rebuilds a dataset from its CSV and sidecar. Grid, scaler and provenance
/// come from the sidecar; the CSV must agree with it on shape.
inline SpectralDataset read_dataset(std::istream& csv, const nlohmann::json& sidecar) {
    SpectralDataset ds;
    try {
        if (sidecar.at("format").get<std::string>() != kDatasetFormat) throw ParseError("not a dataset sidecar");
        ds.grid = WavelengthGrid(sidecar.at("grid").get<std::vector<double>>());
        ds.scaler = scaler_from_json(sidecar.at("scaler"));
        ds.seed = sidecar.at("seed").get<std::uint64_t>();
        ds.method = parse_sampling_method(sidecar.at("method").get<std::string>());
        ds.ranges = state_ranges_from_json(sidecar.at("ranges"));
        ds.fractions = split_fractions_from_json(sidecar.at("fractions"));
        ds.oracle = oracle_config_from_json(sidecar.at("oracle"));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("dataset sidecar: ") + e.what());
    } catch (const ConfigError& e) {
        throw ParseError(std::string("dataset sidecar: ") + e.what());
    }
    const std::size_t k = ds.grid.k();
    if (ds.scaler.size() != kAtmParams + k) throw ParseError("dataset sidecar: scaler size does not match grid");

    const CsvTable t = read_csv(csv);
    if (count_indexed(t, "rho_s_") != k || count_indexed(t, "y_") != k)
        throw ParseError("dataset CSV channel count does not match sidecar k=" + std::to_string(k));
    const std::size_t n = t.rows.size();
    ds.X.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(kAtmParams + k));
    for (std::size_t a = 0; a < kAtmParams; ++a) {
        const std::size_t col = t.column(AtmosphericState::kNames[a]);
        for (std::size_t r = 0; r < n; ++r) ds.X(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(a)) = t.number(r, col);
    }
    ds.X.rightCols(static_cast<Eigen::Index>(k)) = csv_block(t, "rho_s_", k);
    ds.Y = csv_block(t, "y_", k);
    const std::size_t sc = t.column("split");
    ds.split.resize(n);
    for (std::size_t r = 0; r < n; ++r) {
        try {
            ds.split[r] = parse_split(t.rows[r][sc]);
        } catch (const Error& e) {
            throw ParseError("CSV line " + std::to_string(r + 2) + ": " + e.what());
        }
    }
    if (sidecar.contains("n") && sidecar.at("n").get<std::size_t>() != n)
        throw ParseError("dataset CSV has " + std::to_string(n) + " rows, sidecar says " +
                         std::to_string(sidecar.at("n").get<std::size_t>()));
    return ds;
}

/// Writes `<stem>.csv` and `<stem>.json`; `extra` is merged into the sidecar.
inline void save_dataset(const std::filesystem::path& stem, const SpectralDataset& ds,
                         const nlohmann::json& extra = nlohmann::json::object()) {
    std::ostringstream csv;
    write_dataset_csv(csv, ds);
    nlohmann::json side = dataset_sidecar(ds);
    for (const auto& [key, val] : extra.items()) side[key] = val;
    write_file(std::filesystem::path(stem).replace_extension(".csv"), csv.str());
    write_file(std::filesystem::path(stem).replace_extension(".json"), side.dump(2) + "\n");
}

/// Loads from a CSV path (or its stem); the sidecar sits next to it.
inline SpectralDataset load_dataset(const std::filesystem::path& path) {
    const auto csv_path = std::filesystem::path(path).replace_extension(".csv");
    const auto json_path = std::filesystem::path(path).replace_extension(".json");
    const nlohmann::json side = read_json_file(json_path);
    std::ifstream in(csv_path);
    if (!in) throw IoError("cannot open " + csv_path.string());
    return read_dataset(in, side);
}

// ---------------------------------------------------------------- spectra

/// Header `y_0..y_{k-1}`, one spectrum per row.
inline void write_spectra_csv(std::ostream& os, const Eigen::Ref<const Eigen::MatrixXd>& Y, std::string_view prefix = "y_") {
    for (Eigen::Index c = 0; c < Y.cols(); ++c) os << (c ? "," : "") << prefix << c;
    os << '\n';
    for (Eigen::Index r = 0; r < Y.rows(); ++r) {
        for (Eigen::Index c = 0; c < Y.cols(); ++c) os << (c ? "," : "") << format_double(Y(r, c));
        os << '\n';
    }
}

inline Eigen::MatrixXd read_spectra_csv(std::istream& in) {
    const CsvTable t = read_csv(in);
    const std::size_t k = count_indexed(t, "y_");
    if (k == 0) throw ParseError("spectra CSV needs columns y_0..y_{k-1}");
    return csv_block(t, "y_", k);
}

/// Emulator inputs [mu0, tau550, alpha, wvap, rho_s_0..rho_s_{k-1}] from any
/// CSV carrying those columns (extra columns are ignored).
inline Eigen::MatrixXd read_states_csv(std::istream& in, std::size_t k) {
    const CsvTable t = read_csv(in);
    Eigen::MatrixXd X(static_cast<Eigen::Index>(t.rows.size()), static_cast<Eigen::Index>(kAtmParams + k));
    for (std::size_t a = 0; a < kAtmParams; ++a) {
        const std::size_t col = t.column(AtmosphericState::kNames[a]);
        for (std::size_t r = 0; r < t.rows.size(); ++r)
            X(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(a)) = t.number(r, col);
    }
    X.rightCols(static_cast<Eigen::Index>(k)) = csv_block(t, "rho_s_", k);
    return X;
}

}  // namespace nrtm
