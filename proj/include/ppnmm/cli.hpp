#pragma once

// Command-line surface: synth, unmix, eval, diag.
//
// Exit codes: 0 success, 1 usage, 2 data/config error, 3 numerical failure.
// Images are L x N MatrixFiles (bands x pixels); pixel n sits at grid row
// n / n_cols, column n % n_cols.

#include "ppnmm/endmember_init.hpp"
#include "ppnmm/gibbs.hpp"
#include "ppnmm/io.hpp"
#include "ppnmm/metrics.hpp"
#include "ppnmm/synthgen.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace ppnmm {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitNumerical = 3 };

class NumericalFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace fs = std::filesystem;

namespace cli_detail {

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(IoErrorCode::open_failed, path.string(), "cannot open for writing");
  out << text;
}

/// key=value lines with full double precision.
class KeyValueWriter {
 public:
  KeyValueWriter() { os_ << std::setprecision(17); }
  template <class T>
  KeyValueWriter& add(const std::string& key, const T& v) {
    os_ << key << '=' << v << '\n';
    return *this;
  }
  std::string str() const { return os_.str(); }

 private:
  std::ostringstream os_;
};

inline std::map<std::string, std::string> read_key_values(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(IoErrorCode::open_failed, path.string(), "cannot open");
  std::map<std::string, std::string> kv;
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string_view t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string_view::npos) throw IoError(IoErrorCode::parse_error, path.string(), "expected key=value", lineno);
    kv[std::string(detail::trim(t.substr(0, eq)))] = std::string(detail::trim(t.substr(eq + 1)));
  }
  return kv;
}

inline Matrix as_grid(const Eigen::Ref<const RowVector>& values, int rows, int cols) {
  Matrix g(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) g(i, j) = values[static_cast<Index>(i) * cols + j];
  return g;
}

struct Grid {
  int rows = 0;
  int cols = 0;
};

/// Grid shape from the config when it matches N, else N x 1.
inline Grid grid_for(const RunConfig* cfg, Index n) {
  if (cfg != nullptr && cfg->has("n_rows") && cfg->has("n_cols")) {
    const long long r = cfg->get_int("n_rows", 0), c = cfg->get_int("n_cols", 0);
    if (r > 0 && c > 0 && r * c == n) return {static_cast<int>(r), static_cast<int>(c)};
    throw ConfigError(cfg->source(), cfg->line_of("n_rows"), "n_rows * n_cols does not match the image pixel count");
  }
  return {static_cast<int>(n), 1};
}

inline Matrix column(const Vector& v) { return Matrix(v); }

inline void ensure_dir(const fs::path& d) {
  std::error_code ec;
  fs::create_directories(d, ec);
  if (ec) throw IoError(IoErrorCode::open_failed, d.string(), "cannot create directory: " + ec.message());
}

inline void check_finite(const Matrix& m, const std::string& what) {
  if (!m.allFinite()) throw NumericalFailure(what + " contains non-finite values");
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string config;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  int threads = 0;
};

inline int do_synth(const SynthArgs& args, std::ostream& out) {
  std::optional<RunConfig> cfg;
  SynthSpec spec;
  if (!args.config.empty()) {
    cfg = RunConfig::load(args.config);
    spec = synth_spec_from(*cfg);
  }
  if (args.seed) spec.seed = *args.seed;
  const fs::path dir(args.out_dir);
  ensure_dir(dir);
  auto [image, truth] = generate(spec, args.threads);

  write_matrix(image.data(), dir / "image.bin");
  write_matrix(truth.m_true, dir / "m_true.bin");
  write_matrix(truth.a_true, dir / "a_true.bin");
  write_matrix(truth.x_clean, dir / "x_clean.bin");
  if (truth.mixing_model == MixingModel::ppnmm) {
    write_matrix(column(truth.b_true), dir / "b_true.bin");
    write_matrix(as_grid(truth.b_true.transpose(), spec.n_rows, spec.n_cols), dir / "b_true_map.bin");
  }
  if (truth.mixing_model == MixingModel::gbm) write_matrix(truth.gamma_true, dir / "gamma_true.bin");
  for (Index r = 0; r < truth.a_true.rows(); ++r)
    write_matrix(as_grid(truth.a_true.row(r), spec.n_rows, spec.n_cols),
                 dir / ("abundance_true_map_" + std::to_string(r) + ".bin"));

  const double snr = snr_db(truth.x_clean, truth.sigma2_true);
  KeyValueWriter kv;
  kv.add("model", to_string(truth.mixing_model))
      .add("n_rows", spec.n_rows)
      .add("n_cols", spec.n_cols)
      .add("R", spec.n_endmembers)
      .add("L", spec.n_bands)
      .add("N", spec.n_pixels())
      .add("seed", spec.seed)
      .add("noise_sigma2", truth.sigma2_true)
      .add("snr_db", snr);
  write_text(dir / "truth.txt", kv.str());
  write_text(dir / "config.txt", cfg ? cfg->text() : std::string());
  out << "synth: wrote " << to_string(truth.mixing_model) << " scene " << spec.n_rows << "x" << spec.n_cols
      << " (L=" << spec.n_bands << ", R=" << spec.n_endmembers << ", SNR=" << std::fixed << std::setprecision(2) << snr
      << " dB) to " << dir.string() << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct UnmixArgs {
  std::string image;
  int endmembers = 0;
  std::string prior_means;
  std::string config;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  int threads = 0;
};

inline Matrix accept_table(const Chain& chain) {
  const auto n = static_cast<Index>(chain.accept_z.size());
  Matrix t(n, 6);
  for (Index i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(i);
    t.row(i) << chain.epsilon_z[k], chain.accept_z[k], chain.diverged_z[k], chain.epsilon_m[k], chain.accept_m[k],
        chain.diverged_m[k];
  }
  return t;
}

inline double post_burn_mean(const std::vector<double>& v, int n_burn) {
  if (static_cast<std::size_t>(n_burn) >= v.size()) return 0.0;
  double s = 0.0;
  for (std::size_t i = static_cast<std::size_t>(n_burn); i < v.size(); ++i) s += v[i];
  return s / static_cast<double>(v.size() - static_cast<std::size_t>(n_burn));
}

inline int do_unmix(const UnmixArgs& args, std::ostream& out) {
  std::optional<RunConfig> cfg;
  SamplerConfig sc;
  if (!args.config.empty()) {
    cfg = RunConfig::load(args.config);
    sc = sampler_config_from(*cfg);
  }
  if (args.seed) sc.seed = *args.seed;
  sc.threads = args.threads;

  const SpectralImage y(read_matrix(args.image));
  const Index r = args.endmembers;
  const Grid grid = grid_for(cfg ? &*cfg : nullptr, y.n_pixels());
  if (!args.prior_means.empty()) {
    sc.priors.mbar = read_matrix(args.prior_means);
    if (sc.priors.mbar.rows() != y.n_bands() || sc.priors.mbar.cols() != r)
      throw std::invalid_argument("prior means must be L x R = " + std::to_string(y.n_bands()) + " x " +
                                  std::to_string(r));
  }
  const fs::path dir(args.out_dir);
  ensure_dir(dir);

  const auto t0 = std::chrono::steady_clock::now();
  const Chain chain = run(y, r, sc);
  const UnmixResult res = mmse_estimate(chain);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  check_finite(res.a_hat, "abundance estimate");
  check_finite(res.m_hat, "endmember estimate");
  check_finite(res.b_hat, "nonlinearity estimate");
  check_finite(res.sigma2_hat, "noise variance estimate");

  write_matrix(res.a_hat, dir / "a_hat.bin");
  write_matrix(res.m_hat, dir / "m_hat.bin");
  write_matrix(column(res.b_hat), dir / "b_hat.bin");
  write_matrix(column(res.b_nonzero_prob), dir / "b_nonzero_prob.bin");
  write_matrix(column(res.sigma2_hat), dir / "sigma2_hat.bin");
  Matrix hyper(1, 2);
  hyper << res.sigma_b2_hat, res.w_hat;
  write_matrix(hyper, dir / "hyper.bin");
  write_matrix(chain.prior_means, dir / "prior_means.bin");
  write_matrix(as_grid(res.b_hat.transpose(), grid.rows, grid.cols), dir / "b_map.bin");
  write_matrix(as_grid(res.b_nonzero_prob.transpose(), grid.rows, grid.cols), dir / "b_nonzero_map.bin");
  for (Index k = 0; k < r; ++k)
    write_matrix(as_grid(res.a_hat.row(k), grid.rows, grid.cols), dir / ("abundance_map_" + std::to_string(k) + ".bin"));
  write_matrix(scalar_trace(chain), dir / "trace.bin");
  std::string names;
  for (const std::string& nm : scalar_trace_names(r)) names += nm + '\n';
  write_text(dir / "trace_names.txt", names);
  write_matrix(accept_table(chain), dir / "accept.bin");
  {
    std::ostringstream ev;
    ev << std::setprecision(17) << "iteration,block,old_epsilon,new_epsilon\n";
    for (const AdaptEvent& e : chain.adapt_events)
      ev << e.iteration << ',' << (e.block == ChmcBlock::latent ? "latent" : "endmember") << ',' << e.old_epsilon
         << ',' << e.new_epsilon << '\n';
    write_text(dir / "adapt_events.csv", ev.str());
  }

  int div_z = 0, div_m = 0;
  for (int d : chain.diverged_z) div_z += d;
  for (int d : chain.diverged_m) div_m += d;
  KeyValueWriter kv;
  kv.add("R", r)
      .add("L", y.n_bands())
      .add("N", y.n_pixels())
      .add("n_rows", grid.rows)
      .add("n_cols", grid.cols)
      .add("n_mc", sc.n_mc)
      .add("n_burn", sc.n_burn)
      .add("thin", sc.thin)
      .add("kept", chain.samples.size())
      .add("seed", sc.seed)
      .add("accept_z_post_burn", post_burn_mean(chain.accept_z, sc.n_burn))
      .add("accept_m_post_burn", post_burn_mean(chain.accept_m, sc.n_burn))
      .add("epsilon_z_final", chain.epsilon_z.back())
      .add("epsilon_m_final", chain.epsilon_m.back())
      .add("adapt_events", chain.adapt_events.size())
      .add("diverged_z", div_z)
      .add("diverged_m", div_m)
      .add("sigma_b2_hat", res.sigma_b2_hat)
      .add("w_hat", res.w_hat)
      .add("sigma2_hat_mean", res.sigma2_hat.mean())
      .add("linear_fraction", static_cast<double>((res.b_nonzero_prob.array() < kLinearPixelThreshold).count()) /
                                  static_cast<double>(y.n_pixels()));
  write_text(dir / "summary.txt", kv.str());
  write_text(dir / "config.txt", cfg ? cfg->text() : std::string());
  out << "unmix: " << sc.n_mc << " iterations on " << y.n_pixels() << " pixels in " << std::fixed
      << std::setprecision(1) << secs << " s; results in " << dir.string() << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string truth_dir;
  std::string result_dir;
  std::string out_dir;
  int bins = 50;
  bool degrees = false;
};

inline void write_pca_table(const PcaProjection& pca, const Matrix& x, const fs::path& path) {
  write_matrix(Matrix(pca.project(x).transpose()), path);
}

inline int do_eval(const EvalArgs& args, std::ostream& out) {
  const fs::path td(args.truth_dir), rd(args.result_dir);
  const fs::path od = args.out_dir.empty() ? rd : fs::path(args.out_dir);
  ensure_dir(od);
  const SpectralImage y(read_matrix(td / "image.bin"));
  const Matrix m_true = read_matrix(td / "m_true.bin");
  const Matrix a_true = read_matrix(td / "a_true.bin");
  const Matrix m_hat = read_matrix(rd / "m_hat.bin");
  const Matrix a_hat = read_matrix(rd / "a_hat.bin");
  const Matrix b_hat = read_matrix(rd / "b_hat.bin");
  const Matrix b_prob = read_matrix(rd / "b_nonzero_prob.bin");
  if (m_true.rows() != y.n_bands() || a_true.cols() != y.n_pixels() || m_true.cols() != a_true.rows())
    throw std::invalid_argument("eval: ground-truth shapes are inconsistent with the image");
  if (m_hat.rows() != m_true.rows() || m_hat.cols() != m_true.cols() || a_hat.rows() != a_true.rows() ||
      a_hat.cols() != a_true.cols() || b_hat.size() != y.n_pixels() || b_prob.size() != y.n_pixels())
    throw std::invalid_argument("eval: result shapes do not match the ground truth");

  const Vector b_vec = Eigen::Map<const Vector>(b_hat.data(), b_hat.size());
  const Vector p_vec = Eigen::Map<const Vector>(b_prob.data(), b_prob.size());
  const EvalReport rep = evaluate(y, m_true, a_true, m_hat, a_hat, b_vec, p_vec, args.bins);

  int rows = static_cast<int>(y.n_pixels()), cols = 1;
  if (fs::exists(td / "truth.txt")) {
    const auto kv = read_key_values(td / "truth.txt");
    if (kv.count("n_rows") && kv.count("n_cols")) {
      rows = std::stoi(kv.at("n_rows"));
      cols = std::stoi(kv.at("n_cols"));
      if (static_cast<Index>(rows) * cols != y.n_pixels())
        throw std::invalid_argument("eval: truth.txt grid does not match the image");
    }
  }

  const double angle_scale = args.degrees ? 180.0 / std::numbers::pi : 1.0;
  KeyValueWriter kv;
  kv.add("rnmse", rep.rnmse);
  kv.add("sam_unit", args.degrees ? "degrees" : "radians");
  for (std::size_t r = 0; r < rep.sam_per_endmember.size(); ++r)
    kv.add("sam_" + std::to_string(r), angle_scale * rep.sam_per_endmember[r]);
  kv.add("sam_average", angle_scale * rep.sam_average).add("re", rep.re).add("linear_fraction", rep.linear_fraction);
  std::string perm;
  for (std::size_t r = 0; r < rep.permutation.size(); ++r) perm += (r ? "," : "") + std::to_string(rep.permutation[r]);
  kv.add("permutation", perm);
  write_text(od / "eval_report.txt", kv.str());

  Matrix hist(static_cast<Index>(rep.b_histogram.counts.size()), 3);
  for (std::size_t i = 0; i < rep.b_histogram.counts.size(); ++i)
    hist.row(static_cast<Index>(i)) << rep.b_histogram.edges[i], rep.b_histogram.edges[i + 1],
        static_cast<double>(rep.b_histogram.counts[i]);
  write_matrix(hist, od / "b_hist.csv");

  const Index k = std::min<Index>(3, std::min(y.n_bands(), y.n_pixels()));
  const PcaProjection pca = pca_project(y, k);
  write_matrix(Matrix(pca.scores.transpose()), od / "pca_pixels.csv");
  write_pca_table(pca, m_true, od / "pca_m_true.csv");
  const Alignment al = align_endmembers(m_true, m_hat);
  write_pca_table(pca, al.aligned, od / "pca_m_hat.csv");
  if (fs::exists(rd / "prior_means.bin")) {
    const Matrix mbar = read_matrix(rd / "prior_means.bin");
    if (mbar.rows() == m_true.rows() && mbar.cols() == m_true.cols())
      write_pca_table(pca, align_endmembers(m_true, mbar).aligned, od / "pca_prior.csv");
  }
  const Matrix a_aligned = permute_rows(a_hat, rep.permutation);
  for (Index r = 0; r < a_true.rows(); ++r) {
    write_matrix(as_grid(a_aligned.row(r), rows, cols), od / ("abundance_aligned_map_" + std::to_string(r) + ".bin"));
    write_matrix(as_grid(a_true.row(r), rows, cols), od / ("abundance_true_map_" + std::to_string(r) + ".bin"));
  }
  out << kv.str();
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct DiagArgs {
  std::vector<std::string> chains;
  std::string out;
};

inline ChainSummary load_chain_summary(const fs::path& p) {
  ChainSummary c;
  if (fs::is_directory(p)) {
    c.trace = read_matrix(p / "trace.bin");
    if (fs::exists(p / "trace_names.txt")) {
      std::ifstream in(p / "trace_names.txt");
      std::string line;
      while (std::getline(in, line))
        if (!line.empty()) c.names.push_back(line);
    }
    if (fs::exists(p / "accept.bin")) {
      const Matrix a = read_matrix(p / "accept.bin");
      if (a.cols() != 6) throw std::invalid_argument(p.string() + ": accept.bin must have 6 columns");
      c.accept_z = a.col(1);
      c.diverged_z = a.col(2);
      c.accept_m = a.col(4);
      c.diverged_m = a.col(5);
    }
  } else {
    c.trace = read_matrix(p);
  }
  if (c.names.size() != static_cast<std::size_t>(c.trace.cols())) {
    c.names.clear();
    for (Index j = 0; j < c.trace.cols(); ++j) c.names.push_back("param_" + std::to_string(j));
  }
  if (c.trace.rows() < 2) throw std::invalid_argument(p.string() + ": trace needs at least two samples");
  return c;
}

inline std::string format_diagnostics(const DiagnosticsReport& rep) {
  KeyValueWriter kv;
  kv.add("chains", rep.per_chain.size());
  for (std::size_t c = 0; c < rep.per_chain.size(); ++c) {
    const std::string pre = "chain" + std::to_string(c) + ".";
    kv.add(pre + "accept_z_mean", rep.mean_accept_z[c])
        .add(pre + "accept_m_mean", rep.mean_accept_m[c])
        .add(pre + "diverged_z", rep.total_diverged_z[c])
        .add(pre + "diverged_m", rep.total_diverged_m[c]);
    for (std::size_t j = 0; j < rep.names.size(); ++j) {
      const TraceStats& s = rep.per_chain[c][j];
      const std::string p = pre + rep.names[j] + ".";
      kv.add(p + "mean", s.mean).add(p + "sd", s.sd).add(p + "min", s.min).add(p + "max", s.max).add(p + "ess", s.ess);
    }
  }
  for (std::size_t j = 0; j < rep.psrf.size(); ++j) kv.add("psrf." + rep.names[j], rep.psrf[j]);
  return kv.str();
}

inline int do_diag(const DiagArgs& args, std::ostream& out) {
  std::vector<ChainSummary> chains;
  for (const std::string& p : args.chains) chains.push_back(load_chain_summary(p));
  const std::string text = format_diagnostics(diagnostics(chains));
  if (!args.out.empty()) write_text(args.out, text);
  out << text;
  return kExitOk;
}

}  // namespace cli_detail

/// Entry point shared by the executable and the tests.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  using namespace cli_detail;
  CLI::App app{"Bayesian unmixing of hyperspectral images with the polynomial post-nonlinear mixing model"};
  app.require_subcommand(1);

  SynthArgs sa;
  std::uint64_t synth_seed = 0;
  auto* synth = app.add_subcommand("synth", "generate a synthetic scene with ground truth");
  synth->add_option("--config", sa.config, "RunConfig file")->check(CLI::ExistingFile);
  synth->add_option("--out-dir", sa.out_dir, "output directory")->required();
  auto* synth_seed_opt = synth->add_option("--seed", synth_seed, "overrides the config seed");
  synth->add_option("--threads", sa.threads, "worker threads (0 = auto)")->check(CLI::NonNegativeNumber);

  UnmixArgs ua;
  std::uint64_t unmix_seed = 0;
  auto* unmix = app.add_subcommand("unmix", "run the Gibbs sampler on an image");
  unmix->add_option("--image", ua.image, "L x N image MatrixFile")->required()->check(CLI::ExistingFile);
  unmix->add_option("--endmembers", ua.endmembers, "number of endmembers R")->required()->check(CLI::Range(2, 1 << 20));
  unmix->add_option("--prior-means", ua.prior_means, "L x R prior mean MatrixFile (default: purest-pixel search)")
      ->check(CLI::ExistingFile);
  unmix->add_option("--config", ua.config, "RunConfig file")->check(CLI::ExistingFile);
  unmix->add_option("--out-dir", ua.out_dir, "output directory")->required();
  auto* unmix_seed_opt = unmix->add_option("--seed", unmix_seed, "overrides the config seed");
  unmix->add_option("--threads", ua.threads, "worker threads (0 = auto)")->check(CLI::NonNegativeNumber);

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "score an unmixing result against ground truth");
  eval->add_option("--truth-dir", ea.truth_dir, "directory written by synth")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--result-dir", ea.result_dir, "directory written by unmix")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--out-dir", ea.out_dir, "report directory (default: the result directory)");
  eval->add_option("--bins", ea.bins, "histogram bins for b")->check(CLI::PositiveNumber);
  eval->add_flag("--degrees", ea.degrees, "report spectral angles in degrees instead of radians");

  DiagArgs da;
  auto* diag = app.add_subcommand("diag", "convergence diagnostics over one or more chains");
  diag->add_option("--chains", da.chains, "unmix output directories or trace MatrixFiles")->required()->expected(1, -1);
  diag->add_option("--out", da.out, "also write the report to this file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const CLI::App* sub = nullptr;
    for (const CLI::App* s : app.get_subcommands()) sub = s;
    err << (sub != nullptr ? sub->help() : app.help());
    return kExitUsage;
  }

  try {
    if (*synth) {
      if (*synth_seed_opt) sa.seed = synth_seed;
      return do_synth(sa, out);
    }
    if (*unmix) {
      if (*unmix_seed_opt) ua.seed = unmix_seed;
      return do_unmix(ua, out);
    }
    if (*eval) return do_eval(ea, out);
    if (*diag) return do_diag(da, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitData;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << '\n';
    return kExitData;
  } catch (const DegenerateDataError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const NumericalFailure& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const RejectionBudgetError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::invalid_argument& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::domain_error& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  }
  err << app.help();
  return kExitUsage;
}

}  // namespace ppnmm
