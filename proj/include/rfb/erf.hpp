#pragma once

#include "rfb/image.hpp"
#include "rfb/nn.hpp"
#include "rfb/synth.hpp"
#include "rfb/train.hpp"

#include <functional>
#include <iomanip>
#include <limits>

namespace rfb {

struct Footprint {
  std::size_t top = 0, left = 0, bottom = 0, right = 0; // inclusive
  bool empty = true;
  std::size_t height() const { return empty ? 0 : bottom - top + 1; }
  std::size_t width() const { return empty ? 0 : right - left + 1; }
};

/// Effective receptive field of the central output unit.
struct ErfMap {
  std::size_t height = 0, width = 0;
  std::vector<double> raw;  // mean |d y_center / d x|
  std::vector<double> grid; // raw / max(raw)
  double tau = 0.05;
  std::size_t area_at_tau = 0;
  double center_ratio = 0; // +inf when the outer ring is all zero
  Footprint footprint;
  bool degenerate = false; // all-zero map
};

/// Fills the summary metrics from `raw`. center_ratio compares the mean over
/// the disc of radius R/3 to the mean over the ring 2R/3 < d <= R, where R is
/// half the larger footprint side and distances are taken from the footprint
/// center.
inline void summarize(ErfMap &m) {
  const std::size_t H = m.height, W = m.width;
  const double peak = m.raw.empty() ? 0.0 : *std::max_element(m.raw.begin(), m.raw.end());
  m.grid.assign(H * W, 0.0);
  m.degenerate = !(peak > 0);
  m.footprint = Footprint{};
  m.area_at_tau = 0;
  if (m.degenerate) {
    m.center_ratio = 0;
    return;
  }
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const double v = m.raw[y * W + x];
      m.grid[y * W + x] = v / peak;
      if (m.grid[y * W + x] >= m.tau)
        ++m.area_at_tau;
      if (v != 0) {
        auto &f = m.footprint;
        if (f.empty) {
          f = {y, x, y, x, false};
        } else {
          f.top = std::min(f.top, y);
          f.bottom = std::max(f.bottom, y);
          f.left = std::min(f.left, x);
          f.right = std::max(f.right, x);
        }
      }
    }
  const auto &f = m.footprint;
  const double cy = (static_cast<double>(f.top) + static_cast<double>(f.bottom)) / 2;
  const double cx = (static_cast<double>(f.left) + static_cast<double>(f.right)) / 2;
  const double R = static_cast<double>(std::max(f.height(), f.width()) - 1) / 2;
  double inner = 0, outer = 0;
  std::size_t n_inner = 0, n_outer = 0;
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const double d = std::hypot(static_cast<double>(y) - cy, static_cast<double>(x) - cx);
      const double v = m.grid[y * W + x];
      if (d <= R / 3) {
        inner += v;
        ++n_inner;
      } else if (d > 2 * R / 3 && d <= R) {
        outer += v;
        ++n_outer;
      }
    }
  const double mi = n_inner ? inner / static_cast<double>(n_inner) : 0.0;
  const double mo = n_outer ? outer / static_cast<double>(n_outer) : 0.0;
  m.center_ratio = mo > 0 ? mi / mo : std::numeric_limits<double>::infinity();
}

/// Maps (1, C, S, S) inputs to (1, C', S', S') outputs.
template <typename T> using ErfFunction = std::function<Tensor<T>(const Tensor<T> &)>;

/// Averages |d y / d x| of the central output unit over `samples` standard
/// normal inputs and over all output channels, summing over input channels.
template <typename T>
ErfMap erf(const ErfFunction<T> &fn, std::size_t in_channels, std::size_t input_size,
           std::size_t samples, std::uint64_t seed, double tau = 0.05) {
  if (samples == 0 || in_channels == 0 || input_size == 0)
    throw ShapeError("erf: samples, channels and input size must be positive");
  ErfMap m;
  m.height = m.width = input_size;
  m.tau = tau;
  m.raw.assign(input_size * input_size, 0.0);
  const Shape is{1, in_channels, input_size, input_size};
  std::size_t out_channels = 0;
  for (std::size_t s = 0; s < samples; ++s) {
    SplitMix64 rng(derive_seed(seed, s, 11));
    std::vector<T> values(is.numel());
    for (T &v : values)
      v = static_cast<T>(rng.normal());
    Tensor<T> x(is, std::move(values), true);
    Tensor<T> y = fn(x);
    const Shape os = y.shape();
    out_channels = os.c;
    for (std::size_t c = 0; c < os.c; ++c) {
      const Tensor<T> g = input_gradient(y, {0, c, os.h / 2, os.w / 2}, x);
      for (std::size_t ci = 0; ci < in_channels; ++ci)
        for (std::size_t p = 0; p < input_size * input_size; ++p)
          m.raw[p] += std::abs(static_cast<double>(g.data()[ci * input_size * input_size + p]));
    }
  }
  for (double &v : m.raw)
    v /= static_cast<double>(samples * std::max<std::size_t>(out_channels, 1));
  summarize(m);
  return m;
}

/// ERF of a single block with fixed parameters.
template <typename T>
ErfMap block_erf(const BlockNet<T> &net, std::size_t input_size, std::size_t samples,
                 std::uint64_t seed, double tau = 0.05) {
  const auto params = net.store.bind(false);
  ErfFunction<T> fn = [&](const Tensor<T> &x) { return net.forward(params, x); };
  return erf<T>(fn, net.layers.spec.in_channels, input_size, samples, seed, tau);
}

struct Stat {
  double mean = 0, sd = 0;
};

inline Stat mean_sd(const std::vector<double> &v) {
  Stat s;
  if (v.empty())
    return s;
  for (double x : v)
    s.mean += x;
  s.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    for (double x : v)
      s.sd += (x - s.mean) * (x - s.mean);
    s.sd = std::sqrt(s.sd / static_cast<double>(v.size() - 1));
  }
  return s;
}

struct BlockErfSummary {
  std::string name;
  std::size_t params = 0;
  RfFootprint theoretical;
  std::vector<ErfMap> maps; // one per seed
  Stat area, center_ratio, footprint_h, footprint_w;
};

struct ErfReport {
  std::size_t input_size = 0, samples = 0;
  std::vector<std::uint64_t> seeds;
  std::vector<BlockErfSummary> blocks;
  std::vector<std::string> ranking; // by mean area_at_tau, largest first
};

/// Measures every block at random MSRA initialization for each seed.
inline ErfReport compare(const std::vector<std::pair<std::string, BlockSpec>> &blocks,
                         std::size_t input_size, const std::vector<std::uint64_t> &seeds,
                         std::size_t samples = 32, double tau = 0.05) {
  if (blocks.size() < 2)
    throw ShapeError("erf compare: at least two blocks are required");
  if (seeds.empty())
    throw ShapeError("erf compare: at least one seed is required");
  ErfReport rep;
  rep.input_size = input_size;
  rep.samples = samples;
  rep.seeds = seeds;
  for (const auto &[name, spec] : blocks) {
    BlockErfSummary s;
    s.name = name;
    s.params = param_count(spec);
    s.theoretical = max_rf(spec);
    std::vector<double> area, ratio, fh, fw;
    for (std::uint64_t seed : seeds) {
      BlockNet<double> net(spec);
      msra_init(net.store, seed);
      ErfMap m = block_erf(net, input_size, samples, seed, tau);
      area.push_back(static_cast<double>(m.area_at_tau));
      ratio.push_back(m.center_ratio);
      fh.push_back(static_cast<double>(m.footprint.height()));
      fw.push_back(static_cast<double>(m.footprint.width()));
      s.maps.push_back(std::move(m));
    }
    s.area = mean_sd(area);
    s.center_ratio = mean_sd(ratio);
    s.footprint_h = mean_sd(fh);
    s.footprint_w = mean_sd(fw);
    rep.blocks.push_back(std::move(s));
  }
  std::vector<const BlockErfSummary *> order;
  for (const auto &b : rep.blocks)
    order.push_back(&b);
  std::stable_sort(order.begin(), order.end(), [](const auto *a, const auto *b) {
    return a->area.mean > b->area.mean;
  });
  for (const auto *b : order)
    rep.ranking.push_back(b->name);
  return rep;
}

inline nlohmann::json json_number(double v) {
  return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

inline nlohmann::json to_json(const ErfReport &r) {
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto &b : r.blocks)
    blocks.push_back({{"name", b.name},
                      {"params", b.params},
                      {"theoretical_rf", {b.theoretical.h, b.theoretical.w}},
                      {"area_at_tau", {{"mean", b.area.mean}, {"sd", b.area.sd}}},
                      {"center_ratio",
                       {{"mean", json_number(b.center_ratio.mean)},
                        {"sd", json_number(b.center_ratio.sd)}}},
                      {"footprint",
                       {{"h_mean", b.footprint_h.mean}, {"w_mean", b.footprint_w.mean}}}});
  return {{"note", "maps measured at random MSRA initialization, averaged over seeds"},
          {"input_size", r.input_size},
          {"samples", r.samples},
          {"seeds", r.seeds},
          {"blocks", blocks},
          {"ranking", r.ranking}};
}

inline std::string to_text(const ErfReport &r) {
  std::ostringstream os;
  os << "# effective receptive fields at random initialization, " << r.seeds.size()
     << " seeds x " << r.samples << " samples, input " << r.input_size << "x" << r.input_size
     << "\n";
  os << std::left << std::setw(14) << "block" << std::right << std::setw(9) << "params"
     << std::setw(10) << "theo_rf" << std::setw(20) << "area_at_tau" << std::setw(22)
     << "center_ratio" << "\n";
  for (const auto &b : r.blocks) {
    std::ostringstream area, ratio, rf;
    area << std::fixed << std::setprecision(1) << b.area.mean << " +- " << b.area.sd;
    ratio << std::fixed << std::setprecision(3) << b.center_ratio.mean << " +- "
          << b.center_ratio.sd;
    rf << b.theoretical.h << "x" << b.theoretical.w;
    os << std::left << std::setw(14) << b.name << std::right << std::setw(9) << b.params
       << std::setw(10) << rf.str() << std::setw(20) << area.str() << std::setw(22)
       << ratio.str() << "\n";
  }
  os << "ranking by area:";
  for (const auto &n : r.ranking)
    os << ' ' << n;
  os << "\n";
  return os.str();
}

/// 8-bit P5 rendering of the normalized map.
inline void write_erf_pgm(const std::filesystem::path &file, const ErfMap &m) {
  std::vector<std::uint8_t> gray(m.grid.size());
  for (std::size_t i = 0; i < gray.size(); ++i)
    gray[i] = static_cast<std::uint8_t>(std::lround(std::clamp(m.grid[i], 0.0, 1.0) * 255.0));
  write_pgm(file, m.width, m.height, gray);
}

inline void write_erf_csv(const std::filesystem::path &file, const ErfMap &m) {
  std::ofstream out(file, std::ios::binary);
  if (!out)
    throw IoError("cannot write " + file.string());
  out << std::setprecision(17);
  for (std::size_t y = 0; y < m.height; ++y) {
    for (std::size_t x = 0; x < m.width; ++x)
      out << (x ? "," : "") << m.raw[y * m.width + x];
    out << '\n';
  }
}

} // namespace rfb
