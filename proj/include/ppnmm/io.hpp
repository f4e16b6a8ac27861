#pragma once

// Matrix files and key=value run configuration.
//
// Binary matrix layout (all integers little-endian):
//   offset 0   5 bytes  magic "PPNM1"
//   offset 5   3 bytes  dtype tag "f64"
//   offset 8   uint64   rows
//   offset 16  uint64   cols
//   offset 24  rows*cols IEEE-754 binary64 values, row-major, little-endian
//
// CSV layout: a first line "# <rows> <cols>", then one comma-separated line
// per matrix row, values printed with 17 significant digits.

#include "ppnmm/core_model.hpp"
#include "ppnmm/gibbs.hpp"
#include "ppnmm/synthgen.hpp"

#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace ppnmm {

enum class IoErrorCode {
  open_failed,
  malformed_header,
  truncated_payload,
  dimension_overflow,
  trailing_data,
  parse_error,
};

inline const char* to_string(IoErrorCode c) {
  switch (c) {
    case IoErrorCode::open_failed: return "open failed";
    case IoErrorCode::malformed_header: return "malformed header";
    case IoErrorCode::truncated_payload: return "truncated payload";
    case IoErrorCode::dimension_overflow: return "dimension overflow";
    case IoErrorCode::trailing_data: return "trailing data";
    case IoErrorCode::parse_error: return "parse error";
  }
  return "unknown";
}

class IoError : public std::runtime_error {
 public:
  IoError(IoErrorCode code, const std::string& path, const std::string& detail, long line = 0)
      : std::runtime_error(path + ": " + to_string(code) + (line > 0 ? " at line " + std::to_string(line) : "") +
                           (detail.empty() ? "" : ": " + detail)),
        code_(code),
        line_(line) {}

  IoErrorCode code() const { return code_; }
  long line() const { return line_; }

 private:
  IoErrorCode code_;
  long line_;
};

inline constexpr std::string_view kMatrixMagic = "PPNM1";
inline constexpr std::string_view kMatrixDtype = "f64";
inline constexpr std::size_t kMatrixHeaderBytes = 24;
// Upper bound on the element count accepted from a header.
inline constexpr std::uint64_t kMaxMatrixElements = std::uint64_t{1} << 36;

namespace detail {

inline void put_u64_le(std::string& buf, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline std::uint64_t get_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(IoErrorCode::open_failed, path.string(), "cannot open for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(IoErrorCode::open_failed, path.string(), "cannot open for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError(IoErrorCode::open_failed, path.string(), "write failed");
}

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline bool parse_double(std::string_view s, double& out) {
  s = trim(s);
  if (s.empty()) return false;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return res.ec == std::errc() && res.ptr == s.data() + s.size();
}

inline bool parse_u64(std::string_view s, std::uint64_t& out) {
  s = trim(s);
  if (s.empty()) return false;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return res.ec == std::errc() && res.ptr == s.data() + s.size();
}

}  // namespace detail

inline std::string encode_matrix_binary(const Matrix& m) {
  std::string buf;
  buf.reserve(kMatrixHeaderBytes + static_cast<std::size_t>(m.size()) * 8);
  buf.append(kMatrixMagic);
  buf.append(kMatrixDtype);
  detail::put_u64_le(buf, static_cast<std::uint64_t>(m.rows()));
  detail::put_u64_le(buf, static_cast<std::uint64_t>(m.cols()));
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) detail::put_u64_le(buf, std::bit_cast<std::uint64_t>(m(i, j)));
  return buf;
}

inline Matrix decode_matrix_binary(const std::string& bytes, const std::string& path = "<memory>") {
  if (bytes.size() < kMatrixHeaderBytes || std::string_view(bytes).substr(0, 5) != kMatrixMagic)
    throw IoError(IoErrorCode::malformed_header, path, "missing PPNM1 magic");
  if (std::string_view(bytes).substr(5, 3) != kMatrixDtype)
    throw IoError(IoErrorCode::malformed_header, path, "unsupported dtype tag");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint64_t rows = detail::get_u64_le(p + 8);
  const std::uint64_t cols = detail::get_u64_le(p + 16);
  if ((cols != 0 && rows > kMaxMatrixElements / cols) || rows > kMaxMatrixElements || cols > kMaxMatrixElements)
    throw IoError(IoErrorCode::dimension_overflow, path,
                  "declared " + std::to_string(rows) + " x " + std::to_string(cols));
  const std::uint64_t count = rows * cols;
  const std::uint64_t need = kMatrixHeaderBytes + count * 8;
  if (bytes.size() < need)
    throw IoError(IoErrorCode::truncated_payload, path,
                  "expected " + std::to_string(need) + " bytes, found " + std::to_string(bytes.size()));
  if (bytes.size() > need) throw IoError(IoErrorCode::trailing_data, path, "bytes beyond the declared payload");
  Matrix m(static_cast<Index>(rows), static_cast<Index>(cols));
  const unsigned char* payload = p + kMatrixHeaderBytes;
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j)
      m(i, j) = std::bit_cast<double>(detail::get_u64_le(payload + 8 * (static_cast<std::size_t>(i) * cols + j)));
  return m;
}

inline std::string encode_matrix_csv(const Matrix& m) {
  std::ostringstream out;
  out << "# " << m.rows() << ' ' << m.cols() << '\n';
  out << std::setprecision(17);
  for (Index i = 0; i < m.rows(); ++i) {
    for (Index j = 0; j < m.cols(); ++j) {
      if (j) out << ',';
      out << m(i, j);
    }
    out << '\n';
  }
  return out.str();
}

inline Matrix decode_matrix_csv(const std::string& text, const std::string& path = "<memory>") {
  std::istringstream in(text);
  std::string line;
  long lineno = 0;
  if (!std::getline(in, line)) throw IoError(IoErrorCode::malformed_header, path, "empty file", 1);
  ++lineno;
  std::string_view head = detail::trim(line);
  if (head.empty() || head[0] != '#') throw IoError(IoErrorCode::malformed_header, path, "expected '# rows cols'", 1);
  std::istringstream hs{std::string(head.substr(1))};
  std::string rs, cs, extra;
  std::uint64_t rows = 0, cols = 0;
  if (!(hs >> rs >> cs) || (hs >> extra) || !detail::parse_u64(rs, rows) || !detail::parse_u64(cs, cols))
    throw IoError(IoErrorCode::malformed_header, path, "expected '# rows cols'", 1);
  if ((cols != 0 && rows > kMaxMatrixElements / cols) || rows > kMaxMatrixElements || cols > kMaxMatrixElements)
    throw IoError(IoErrorCode::dimension_overflow, path, "declared " + rs + " x " + cs, 1);
  Matrix m(static_cast<Index>(rows), static_cast<Index>(cols));
  for (std::uint64_t i = 0; i < rows; ++i) {
    if (!std::getline(in, line))
      throw IoError(IoErrorCode::truncated_payload, path, "expected " + std::to_string(rows) + " data rows", lineno + 1);
    ++lineno;
    std::string_view rest = detail::trim(line);
    std::uint64_t j = 0;
    while (true) {
      const auto comma = rest.find(',');
      const std::string_view field = rest.substr(0, comma);
      if (j >= cols)
        throw IoError(IoErrorCode::parse_error, path, "more than " + std::to_string(cols) + " values", lineno);
      double v = 0.0;
      if (!detail::parse_double(field, v))
        throw IoError(IoErrorCode::parse_error, path, "bad number '" + std::string(field) + "'", lineno);
      m(static_cast<Index>(i), static_cast<Index>(j)) = v;
      ++j;
      if (comma == std::string_view::npos) break;
      rest = rest.substr(comma + 1);
    }
    if (j != cols)
      throw IoError(IoErrorCode::parse_error, path,
                    "expected " + std::to_string(cols) + " values, found " + std::to_string(j), lineno);
  }
  while (std::getline(in, line)) {
    ++lineno;
    if (!detail::trim(line).empty()) throw IoError(IoErrorCode::trailing_data, path, "rows beyond the declared count", lineno);
  }
  return m;
}

inline bool is_csv_path(const std::filesystem::path& p) { return p.extension() == ".csv" || p.extension() == ".txt"; }

/// Reads either format; binary files are recognized by their magic bytes.
inline Matrix read_matrix(const std::filesystem::path& path) {
  const std::string bytes = detail::read_file(path);
  if (bytes.size() >= 5 && std::string_view(bytes).substr(0, 5) == kMatrixMagic) return decode_matrix_binary(bytes, path.string());
  if (!bytes.empty() && bytes[0] == '#') return decode_matrix_csv(bytes, path.string());
  throw IoError(IoErrorCode::malformed_header, path.string(), "neither a PPNM1 binary nor a '# rows cols' CSV file");
}

/// Writes CSV for .csv/.txt paths and the binary form otherwise.
inline void write_matrix(const Matrix& m, const std::filesystem::path& path) {
  detail::write_file(path, is_csv_path(path) ? encode_matrix_csv(m) : encode_matrix_binary(m));
}

// ---------------------------------------------------------------------------
// Run configuration

class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& source, long line, const std::string& what)
      : std::runtime_error(source + (line > 0 ? ":" + std::to_string(line) : "") + ": " + what), line_(line) {}
  long line() const { return line_; }

 private:
  long line_;
};

struct ConfigEntry {
  std::string value;
  long line = 0;
};

/// Flat key=value configuration. Blank lines and lines starting with '#' are
/// ignored; unknown and duplicate keys are errors.
class RunConfig {
 public:
  static const std::set<std::string>& known_keys() {
    static const std::set<std::string> keys{
        // sampler
        "n_mc", "n_burn", "thin", "seed", "chmc_repeats", "eps_z", "eps_m", "nlf_min", "nlf_max", "adapt_window",
        "adapt_low", "adapt_high", "adapt_factor",
        // priors
        "s2", "gamma", "nu",
        // scene
        "n_rows", "n_cols", "R", "L", "model", "a_max", "noise_sigma2", "b_min", "b_max", "b_min_abs", "gamma_min",
        "gamma_max", "endmembers"};
    return keys;
  }

  static RunConfig parse(const std::string& text, const std::string& source = "<config>",
                         std::filesystem::path base_dir = {}) {
    RunConfig cfg;
    cfg.source_ = source;
    cfg.text_ = text;
    cfg.base_dir_ = std::move(base_dir);
    std::istringstream in(text);
    std::string line;
    long lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const std::string_view t = detail::trim(line);
      if (t.empty() || t[0] == '#') continue;
      const auto eq = t.find('=');
      if (eq == std::string_view::npos) throw ConfigError(source, lineno, "expected key=value");
      const std::string key(detail::trim(t.substr(0, eq)));
      const std::string value(detail::trim(t.substr(eq + 1)));
      if (key.empty()) throw ConfigError(source, lineno, "empty key");
      if (!known_keys().count(key)) throw ConfigError(source, lineno, "unknown key '" + key + "'");
      if (value.empty()) throw ConfigError(source, lineno, "empty value for '" + key + "'");
      if (cfg.entries_.count(key)) throw ConfigError(source, lineno, "duplicate key '" + key + "'");
      cfg.entries_[key] = {value, lineno};
    }
    return cfg;
  }

  static RunConfig load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(IoErrorCode::open_failed, path.string(), "cannot open config");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path.string(), path.parent_path());
  }

  bool has(const std::string& key) const { return entries_.count(key) > 0; }
  const std::string& text() const { return text_; }
  const std::map<std::string, ConfigEntry>& entries() const { return entries_; }

  long line_of(const std::string& key) const {
    const auto it = entries_.find(key);
    return it == entries_.end() ? 0 : it->second.line;
  }

  double get_double(const std::string& key, double fallback) const {
    const auto it = entries_.find(key);
    if (it == entries_.end()) return fallback;
    double v = 0.0;
    if (!detail::parse_double(it->second.value, v) || !std::isfinite(v))
      throw ConfigError(source_, it->second.line, "'" + key + "' expects a finite number");
    return v;
  }

  long long get_int(const std::string& key, long long fallback) const {
    const auto it = entries_.find(key);
    if (it == entries_.end()) return fallback;
    long long v = 0;
    const std::string& s = it->second.value;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
      throw ConfigError(source_, it->second.line, "'" + key + "' expects an integer");
    return v;
  }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    const auto it = entries_.find(key);
    return it == entries_.end() ? fallback : it->second.value;
  }

  std::filesystem::path resolve(const std::string& key) const {
    std::filesystem::path p = get_string(key, "");
    if (p.is_relative() && !base_dir_.empty()) p = base_dir_ / p;
    return p;
  }

  /// Re-raises a validation failure as a ConfigError located at `key`.
  template <class Fn>
  void check(const std::string& key, Fn&& fn) const {
    try {
      fn();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(source_, line_of(key), e.what());
    }
  }

  const std::string& source() const { return source_; }

 private:
  std::string source_;
  std::string text_;
  std::filesystem::path base_dir_;
  std::map<std::string, ConfigEntry> entries_;
};

namespace detail {

inline int checked_int(const RunConfig& c, const std::string& key, int fallback) {
  const long long v = c.get_int(key, fallback);
  if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max())
    throw ConfigError(c.source(), c.line_of(key), "'" + key + "' out of range");
  return static_cast<int>(v);
}

/// Line of the last-defined key among `keys` (the most likely culprit of a cross-field error).
inline std::string last_key(const RunConfig& c, std::initializer_list<const char*> keys) {
  std::string best = *keys.begin();
  for (const char* k : keys)
    if (c.line_of(k) > c.line_of(best)) best = k;
  return best;
}

}  // namespace detail

inline SamplerConfig sampler_config_from(const RunConfig& c, SamplerConfig base = {}) {
  SamplerConfig s = std::move(base);
  s.n_mc = detail::checked_int(c, "n_mc", s.n_mc);
  s.n_burn = detail::checked_int(c, "n_burn", s.n_burn);
  s.thin = detail::checked_int(c, "thin", s.thin);
  const long long seed = c.get_int("seed", static_cast<long long>(s.seed));
  if (seed < 0) throw ConfigError(c.source(), c.line_of("seed"), "'seed' must be non-negative");
  s.seed = static_cast<std::uint64_t>(seed);
  s.chmc_repeats = detail::checked_int(c, "chmc_repeats", s.chmc_repeats);
  s.chmc_z.epsilon = c.get_double("eps_z", s.chmc_z.epsilon);
  s.chmc_m.epsilon = c.get_double("eps_m", s.chmc_m.epsilon);
  for (ChmcConfig* ch : {&s.chmc_z, &s.chmc_m}) {
    ch->nlf_min = detail::checked_int(c, "nlf_min", ch->nlf_min);
    ch->nlf_max = detail::checked_int(c, "nlf_max", ch->nlf_max);
    ch->adapt_window = detail::checked_int(c, "adapt_window", ch->adapt_window);
    ch->adapt_low = c.get_double("adapt_low", ch->adapt_low);
    ch->adapt_high = c.get_double("adapt_high", ch->adapt_high);
    ch->adapt_factor = c.get_double("adapt_factor", ch->adapt_factor);
  }
  s.priors.s2 = c.get_double("s2", s.priors.s2);
  s.priors.gamma = c.get_double("gamma", s.priors.gamma);
  s.priors.nu = c.get_double("nu", s.priors.nu);
  c.check(detail::last_key(c, {"n_mc", "n_burn", "thin", "chmc_repeats", "eps_z", "eps_m", "nlf_min", "nlf_max",
                               "adapt_window", "adapt_low", "adapt_high", "adapt_factor", "s2", "gamma", "nu"}),
          [&] { s.validate(); });
  return s;
}

inline SynthSpec synth_spec_from(const RunConfig& c, SynthSpec base = {}) {
  SynthSpec s = std::move(base);
  s.n_rows = detail::checked_int(c, "n_rows", s.n_rows);
  s.n_cols = detail::checked_int(c, "n_cols", s.n_cols);
  s.n_endmembers = detail::checked_int(c, "R", s.n_endmembers);
  s.n_bands = detail::checked_int(c, "L", s.n_bands);
  if (c.has("model")) {
    c.check("model", [&] { s.mixing_model = parse_mixing_model(c.get_string("model", "")); });
  }
  s.a_max = c.get_double("a_max", s.a_max);
  s.noise_sigma2 = c.get_double("noise_sigma2", s.noise_sigma2);
  s.b_range.lo = c.get_double("b_min", s.b_range.lo);
  s.b_range.hi = c.get_double("b_max", s.b_range.hi);
  s.b_min_abs = c.get_double("b_min_abs", s.b_min_abs);
  s.gamma_range.lo = c.get_double("gamma_min", s.gamma_range.lo);
  s.gamma_range.hi = c.get_double("gamma_max", s.gamma_range.hi);
  const long long seed = c.get_int("seed", static_cast<long long>(s.seed));
  if (seed < 0) throw ConfigError(c.source(), c.line_of("seed"), "'seed' must be non-negative");
  s.seed = static_cast<std::uint64_t>(seed);
  if (c.has("endmembers")) s.endmembers = read_matrix(c.resolve("endmembers"));
  c.check(detail::last_key(c, {"n_rows", "n_cols", "R", "L", "a_max", "noise_sigma2", "b_min", "b_max", "b_min_abs",
                               "gamma_min", "gamma_max", "endmembers"}),
          [&] { s.validate(); });
  return s;
}

}  // namespace ppnmm
