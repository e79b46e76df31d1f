#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <random>

#include "xstage/error.hpp"
#include "xstage/harness.hpp"

namespace xstage {

namespace {

constexpr int kMaxRedraws = 2000;
// Probes are kept away from relu kinks, near-singular layer norms, bilinear cell edges and
// pyramid level boundaries.
constexpr double kReluMargin = 5e-3;
constexpr double kNormSpreadMargin = 0.2;
constexpr double kGridMargin = 2e-3;
constexpr double kBoxMargin = 1e-2;
// Central differences at step 1e-5 on O(1) outputs carry ~1e-10 of roundoff, so a nonzero
// derivative below this cannot be resolved to 1e-4 relative error; such probes are redrawn.
constexpr double kResolvableDerivative = 1e-5;

class Draw {
 public:
  explicit Draw(std::uint64_t seed) : rng_(seed) {}

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng_); }

  void fill(std::span<double> xs, double lo, double hi) {
    for (double& x : xs) x = uniform(lo, hi);
  }
  Matrix matrix(std::size_t rows, std::size_t cols, double lo = -1.0, double hi = 1.0) {
    Matrix m(rows, cols);
    fill(m.flat(), lo, hi);
    return m;
  }
  Vector vector(std::size_t n, double lo = -1.0, double hi = 1.0) {
    Vector v(n);
    fill(v, lo, hi);
    return v;
  }

 private:
  std::mt19937_64 rng_;
};

/// One parameter block of one probe: f restricted to the block, its analytic gradient and
/// the point to evaluate at.
struct BlockSpec {
  std::string name;
  ScalarFunction f;
  Vector analytic;
  Vector probe;
};
using ProbeSpecs = std::vector<BlockSpec>;

using Slots = std::vector<double*>;

void collect(Slots& s, Matrix& m) {
  for (double& x : m.flat()) s.push_back(&x);
}
void collect(Slots& s, Vector& v) {
  for (double& x : v) s.push_back(&x);
}
void append(Vector& out, const Matrix& m) { out.insert(out.end(), m.flat().begin(), m.flat().end()); }
void append(Vector& out, const Vector& v) { out.insert(out.end(), v.begin(), v.end()); }
Vector flat(const Matrix& m) { return {m.flat().begin(), m.flat().end()}; }

double weighted_sum(const Matrix& r, const Matrix& m) {
  double s = 0.0;
  for (std::size_t i = 0; i < m.flat().size(); ++i) s += r.flat()[i] * m.flat()[i];
  return s;
}

double weighted_sum(const SampledFeatures& r, const SampledFeatures& m) {
  double s = 0.0;
  for (std::size_t g = 0; g < m.size(); ++g) s += weighted_sum(r[g], m[g]);
  return s;
}

/// Builds the spec of the block selected by `slots`; f perturbs a copy of the inputs.
template <class Inputs>
BlockSpec block(std::string name, std::shared_ptr<const Inputs> inputs,
                std::function<Slots(Inputs&)> slots, std::function<double(const Inputs&)> loss,
                Vector analytic) {
  Inputs probe_inputs = *inputs;
  Vector probe;
  for (double* p : slots(probe_inputs)) probe.push_back(*p);
  ScalarFunction f = [inputs, slots, loss](std::span<const double> x) {
    Inputs copy = *inputs;
    const auto sl = slots(copy);
    for (std::size_t i = 0; i < sl.size(); ++i) *sl[i] = x[i];
    return loss(copy);
  };
  return {std::move(name), std::move(f), std::move(analytic), std::move(probe)};
}

// ------------------------------------------------------------ generate_channel_filter

struct GeneratorInputs {
  Vector content;
  FilterGenerator gen;
  Matrix r;
};

std::optional<ProbeSpecs> generator_probe(Draw& d) {
  const std::size_t dim = 8, rows = 4, cols = 4;
  auto in = std::make_shared<GeneratorInputs>(
      GeneratorInputs{d.vector(dim), FilterGenerator::zeros(rows, cols, dim), d.matrix(rows, cols)});
  d.fill(in->gen.weight.flat(), -1.0, 1.0);
  d.fill(in->gen.bias, -1.0, 1.0);
  const std::function<double(const GeneratorInputs&)> loss = [](const GeneratorInputs& x) {
    return weighted_sum(x.r, generate_channel_filter(x.content, x.gen).kernel);
  };
  const auto g = generate_filter_backward(in->content, in->gen, in->r);
  using I = GeneratorInputs;
  std::shared_ptr<const I> c = in;
  return ProbeSpecs{
      block<I>("generate_channel_filter.content", c, [](I& x) { Slots s; collect(s, x.content); return s; }, loss, g.content),
      block<I>("generate_channel_filter.weight", c, [](I& x) { Slots s; collect(s, x.gen.weight); return s; }, loss, flat(g.weight)),
      block<I>("generate_channel_filter.bias", c, [](I& x) { Slots s; collect(s, x.gen.bias); return s; }, loss, g.bias)};
}

// ------------------------------------------------------------ adapt_filter

struct AdapterInputs {
  Matrix prev, cur;
  Vector content;
  Adapter adapter;
  Matrix r;
};

std::optional<ProbeSpecs> adapter_probe(Draw& d) {
  const std::size_t rows = 4, cols = 5, dim = 6;
  auto in = std::make_shared<AdapterInputs>(AdapterInputs{d.matrix(rows, cols), d.matrix(rows, cols),
                                                          d.vector(dim), {d.matrix(rows, dim), d.matrix(cols, dim)},
                                                          d.matrix(rows, cols)});
  const std::function<double(const AdapterInputs&)> loss = [](const AdapterInputs& x) {
    return weighted_sum(x.r, adapt_filter({x.prev, 0}, {x.cur, 0}, x.content, x.adapter).kernel);
  };
  const auto g = adapt_filter_backward(in->prev, in->cur, in->content, in->adapter, in->r);
  using I = AdapterInputs;
  std::shared_ptr<const I> c = in;
  return ProbeSpecs{
      block<I>("adapt_filter.prev", c, [](I& x) { Slots s; collect(s, x.prev); return s; }, loss, flat(g.prev)),
      block<I>("adapt_filter.cur", c, [](I& x) { Slots s; collect(s, x.cur); return s; }, loss, flat(g.cur)),
      block<I>("adapt_filter.content", c, [](I& x) { Slots s; collect(s, x.content); return s; }, loss, g.content),
      block<I>("adapt_filter.row_weight", c, [](I& x) { Slots s; collect(s, x.adapter.row_weight); return s; }, loss, flat(g.row_weight)),
      block<I>("adapt_filter.col_weight", c, [](I& x) { Slots s; collect(s, x.adapter.col_weight); return s; }, loss, flat(g.col_weight))};
}

// ------------------------------------------------------------ static_group_mix

struct StaticInputs {
  Matrix x;
  StaticMixParams p;
  Matrix r;
};

StaticMixParams random_static(Draw& d, int points, int channels) {
  auto p = StaticMixParams::identity(points, channels);
  d.fill(p.within.flat(), -0.3, 0.3);
  d.fill(p.across.flat(), -0.3, 0.3);
  d.fill(p.channel.flat(), -1.0, 1.0);
  d.fill(p.channel_bias, -0.2, 0.2);
  return p;
}

std::optional<ProbeSpecs> static_probe(Draw& d) {
  static constexpr int kPoints[] = {4, 8, 16};
  const int points = kPoints[d.integer(0, 2)];
  const int channels = 3;
  const auto p = static_cast<std::size_t>(points);
  auto in = std::make_shared<StaticInputs>(
      StaticInputs{d.matrix(p, channels), random_static(d, points, channels), d.matrix(p, channels)});
  const std::function<double(const StaticInputs&)> loss = [](const StaticInputs& x) {
    return weighted_sum(x.r, static_group_mix(x.x, x.p));
  };
  const auto g = static_group_mix_backward(in->x, in->p, in->r);
  const std::string base = "static_group_mix[P=" + std::to_string(points) + "]";
  using I = StaticInputs;
  std::shared_ptr<const I> c = in;
  return ProbeSpecs{
      block<I>(base + ".input", c, [](I& x) { Slots s; collect(s, x.x); return s; }, loss, flat(g.input)),
      block<I>(base + ".within", c, [](I& x) { Slots s; collect(s, x.p.within); return s; }, loss, flat(g.params.within)),
      block<I>(base + ".across", c, [](I& x) { Slots s; collect(s, x.p.across); return s; }, loss, flat(g.params.across)),
      block<I>(base + ".channel", c, [](I& x) { Slots s; collect(s, x.p.channel); return s; }, loss, flat(g.params.channel)),
      block<I>(base + ".channel_bias", c, [](I& x) { Slots s; collect(s, x.p.channel_bias); return s; }, loss, g.params.channel_bias)};
}

// ------------------------------------------------------------ cascade_channel_mix

struct CascadeInputs {
  SampledFeatures x;
  FilterBank bank;
  FilterSet current;
  Vector content;
  CascadeParams params;
  SampledFeatures r;
};

// True when no layer-norm input row is nearly constant and no relu input is near zero.
bool cascade_is_smooth(const CascadeInputs& in) {
  bool smooth = true;
  const auto observe = [&](const Matrix& h, const NormParams& n) {
    Matrix y(h.rows(), h.cols());
    for (std::size_t r = 0; r < h.rows(); ++r) {
      const auto row = h.row(r);
      double mean = 0.0, var = 0.0;
      for (double v : row) mean += v;
      mean /= static_cast<double>(row.size());
      for (double v : row) var += (v - mean) * (v - mean);
      if (std::sqrt(var / static_cast<double>(row.size())) < kNormSpreadMargin) smooth = false;
      const Vector z = layer_norm(row, n.gain, n.shift);
      for (std::size_t c = 0; c < z.size(); ++c) {
        if (std::abs(z[c]) < kReluMargin) smooth = false;
        y(r, c) = relu(z[c]);
      }
    }
    return y;
  };
  const std::size_t reused = in.params.statics.size();
  const std::size_t first = in.bank.channel.size() - reused;
  for (std::size_t g = 0; g < in.x.size() && smooth; ++g) {
    const Matrix& cur = in.current.kernels[g];
    const auto v = std::span<const double>(in.content).subspan(g * cur.rows(), cur.rows());
    Matrix y = observe(matmul(in.x[g], cur), in.params.norms[0]);
    for (std::size_t k = 0; k < reused; ++k) {
      const Matrix u = static_group_mix(y, in.params.statics[k]);
      const Matrix m = adapt_filter({in.bank.channel[first + k].kernels[g], 0}, {cur, 0}, v,
                                    in.params.adapters[k][g])
                           .kernel;
      y = observe(matmul(u, m), in.params.norms[k + 1]);
    }
  }
  return smooth;
}

CascadeInputs random_cascade(Draw& d, int reused) {
  const int groups = 2, channels = 4, points = 4;
  const auto dc = static_cast<std::size_t>(channels);
  const auto p = static_cast<std::size_t>(points);
  CascadeInputs in;
  for (int g = 0; g < groups; ++g) {
    in.x.push_back(d.matrix(p, dc));
    in.current.kernels.push_back(d.matrix(dc, dc));
    in.r.push_back(d.matrix(p, dc));
  }
  for (int k = 0; k < reused; ++k) {
    FilterSet set{k + 1, {}};
    std::vector<Adapter> adapters;
    for (int g = 0; g < groups; ++g) {
      set.kernels.push_back(d.matrix(dc, dc));
      adapters.push_back({d.matrix(dc, dc), d.matrix(dc, dc)});
    }
    in.bank.channel.push_back(std::move(set));
    in.params.adapters.push_back(std::move(adapters));
    in.params.statics.push_back(random_static(d, points, channels));
  }
  for (int k = 0; k <= reused; ++k) {
    in.params.norms.push_back({d.vector(dc, 0.5, 1.5), d.vector(dc, -0.3, 0.3)});
  }
  in.content = d.vector(dc * groups);
  return in;
}

std::optional<ProbeSpecs> cascade_probe(Draw& d, int reused) {
  auto in = std::make_shared<CascadeInputs>(random_cascade(d, reused));
  if (!cascade_is_smooth(*in)) return std::nullopt;
  const std::function<double(const CascadeInputs&)> loss = [](const CascadeInputs& x) {
    return weighted_sum(x.r, cascade_channel_mix(x.x, x.bank, x.current, x.content, x.params));
  };
  const auto g = cascade_channel_mix_backward(in->x, in->bank, in->current, in->content, in->params, in->r);
  const std::string base = "cascade_channel_mix[reused=" + std::to_string(reused) + "]";
  using I = CascadeInputs;
  std::shared_ptr<const I> c = in;
  ProbeSpecs specs;

  Vector a;
  for (const auto& m : g.features) append(a, m);
  specs.push_back(block<I>(base + ".features", c, [](I& x) {
    Slots s;
    for (auto& m : x.x) collect(s, m);
    return s;
  }, loss, a));

  a.clear();
  for (const auto& m : g.current) append(a, m);
  specs.push_back(block<I>(base + ".current", c, [](I& x) {
    Slots s;
    for (auto& m : x.current.kernels) collect(s, m);
    return s;
  }, loss, a));

  specs.push_back(block<I>(base + ".content", c, [](I& x) {
    Slots s;
    collect(s, x.content);
    return s;
  }, loss, g.content));

  a.clear();
  for (const auto& n : g.params.norms) {
    append(a, n.gain);
    append(a, n.shift);
  }
  specs.push_back(block<I>(base + ".norms", c, [](I& x) {
    Slots s;
    for (auto& n : x.params.norms) {
      collect(s, n.gain);
      collect(s, n.shift);
    }
    return s;
  }, loss, a));

  if (reused == 0) return specs;

  a.clear();
  for (const auto& set : g.bank)
    for (const auto& m : set) append(a, m);
  specs.push_back(block<I>(base + ".bank", c, [](I& x) {
    Slots s;
    for (auto& set : x.bank.channel)
      for (auto& m : set.kernels) collect(s, m);
    return s;
  }, loss, a));

  a.clear();
  for (const auto& set : g.params.adapters) {
    for (const auto& ad : set) {
      append(a, ad.row_weight);
      append(a, ad.col_weight);
    }
  }
  specs.push_back(block<I>(base + ".adapters", c, [](I& x) {
    Slots s;
    for (auto& set : x.params.adapters) {
      for (auto& ad : set) {
        collect(s, ad.row_weight);
        collect(s, ad.col_weight);
      }
    }
    return s;
  }, loss, a));

  a.clear();
  for (const auto& st : g.params.statics) {
    append(a, st.within);
    append(a, st.across);
    append(a, st.channel);
    append(a, st.channel_bias);
  }
  specs.push_back(block<I>(base + ".statics", c, [](I& x) {
    Slots s;
    for (auto& st : x.params.statics) {
      collect(s, st.within);
      collect(s, st.across);
      collect(s, st.channel);
      collect(s, st.channel_bias);
    }
    return s;
  }, loss, a));
  return specs;
}

// ------------------------------------------------------------ sample_points

struct SamplerInputs {
  Vector content;
  BoxXYZR box;
  SamplerParams params;
  SampledFeatures r;
  std::shared_ptr<const Pyramid> pyramid;
};

constexpr std::size_t kSamplerChannels = 3;

// True when every sampling point sits away from bilinear cell edges of the levels it reads
// and from the level scales where the pyramid blend switches or clamps.
bool sampler_is_smooth(const SamplerInputs& in) {
  const Pyramid& pyramid = *in.pyramid;
  const auto res = sample_points(in.content, in.box, in.params, pyramid, kSamplerChannels);
  const auto frac_gap = [](double v) { return std::abs(v - std::round(v)); };
  for (const auto& group : res.points) {
    for (const auto& pt : group) {
      for (std::size_t l = 0; l < pyramid.size(); ++l) {
        const auto& level = pyramid[l];
        const double dz = pt.z - level.scale;
        if (std::abs(dz) < kGridMargin) return false;
        const bool read = std::abs(dz) < 1.0 || (dz < 0 && l == 0) || (dz > 0 && l + 1 == pyramid.size());
        if (read && (frac_gap(pt.x / level.stride - 0.5) < kGridMargin ||
                     frac_gap(pt.y / level.stride - 0.5) < kGridMargin)) {
          return false;
        }
      }
    }
  }
  return true;
}

std::optional<ProbeSpecs> sampler_probe(Draw& d) {
  const int groups = 2, points = 8, dim = 6;
  const ImageSize image{128.0, 128.0};
  auto in = std::make_shared<SamplerInputs>();
  in->pyramid = std::make_shared<const Pyramid>(make_random_pyramid(
      image, kSamplerChannels * groups, static_cast<std::uint64_t>(d.integer(0, 1 << 30))));
  in->content = d.vector(dim);
  in->box = {d.uniform(40.0, 88.0), d.uniform(40.0, 88.0), d.uniform(3.2, 4.8), d.uniform(-0.5, 0.5)};
  in->params = SamplerParams::zeros(groups, points, dim);
  d.fill(in->params.group_weight.flat(), -0.3, 0.3);
  d.fill(in->params.point_weight.flat(), -0.3, 0.3);
  d.fill(in->params.group_bias, -0.5, 0.5);
  d.fill(in->params.point_bias, -0.5, 0.5);
  for (int g = 0; g < groups; ++g) in->r.push_back(d.matrix(static_cast<std::size_t>(points), kSamplerChannels));
  if (!sampler_is_smooth(*in)) return std::nullopt;

  const std::function<double(const SamplerInputs&)> loss = [](const SamplerInputs& x) {
    return weighted_sum(x.r, sample_points(x.content, x.box, x.params, *x.pyramid, kSamplerChannels).features);
  };
  const auto g = sample_points_backward(in->content, in->box, in->params, *in->pyramid, kSamplerChannels, in->r);
  using I = SamplerInputs;
  std::shared_ptr<const I> c = in;
  return ProbeSpecs{
      block<I>("sample_points.content", c, [](I& x) { Slots s; collect(s, x.content); return s; }, loss, g.content),
      block<I>("sample_points.group_weight", c, [](I& x) { Slots s; collect(s, x.params.group_weight); return s; }, loss, flat(g.group_weight)),
      block<I>("sample_points.group_bias", c, [](I& x) { Slots s; collect(s, x.params.group_bias); return s; }, loss, g.group_bias),
      block<I>("sample_points.point_weight", c, [](I& x) { Slots s; collect(s, x.params.point_weight); return s; }, loss, flat(g.point_weight)),
      block<I>("sample_points.point_bias", c, [](I& x) { Slots s; collect(s, x.params.point_bias); return s; }, loss, g.point_bias)};
}

// ------------------------------------------------------------ losses

std::optional<ProbeSpecs> focal_probe(Draw& d) {
  const std::size_t classes = 6;
  const Vector scores = d.vector(classes, 0.02, 0.98);
  Vector target(classes);
  for (double& t : target) t = d.integer(0, 1);
  const CostWeights w;
  ScalarFunction f = [target, w](std::span<const double> p) {
    return focal_loss_multihot(p, target, w.focal_alpha, w.focal_gamma);
  };
  return ProbeSpecs{{"focal_loss_multihot.scores", std::move(f),
                     focal_loss_multihot_grad(scores, target, w.focal_alpha, w.focal_gamma), scores}};
}

bool boxes_are_smooth(const BoxXYXY& a, const BoxXYXY& b) {
  const double gaps[] = {a.x1 - b.x1, a.x2 - b.x2, a.x1 - b.x2, a.x2 - b.x1, a.y1 - b.y1,
                         a.y2 - b.y2, a.y1 - b.y2, a.y2 - b.y1, a.width(),   a.height()};
  return std::all_of(std::begin(gaps), std::end(gaps), [](double g) { return std::abs(g) >= kBoxMargin; }) &&
         a.width() > 0.0 && a.height() > 0.0;
}

std::optional<ProbeSpecs> localization_probe(Draw& d) {
  const ImageSize image{100.0, 80.0};
  const double x1 = d.uniform(0.0, 60.0), y1 = d.uniform(0.0, 50.0);
  const BoxXYXY target{x1, y1, x1 + d.uniform(5.0, 40.0), y1 + d.uniform(5.0, 30.0)};
  const double j = 10.0;
  const BoxXYXY pred{target.x1 + d.uniform(-j, j), target.y1 + d.uniform(-j, j),
                     target.x2 + d.uniform(-j, j), target.y2 + d.uniform(-j, j)};
  if (!boxes_are_smooth(pred, target)) return std::nullopt;
  const auto g = localization_loss_grad(pred, target, image);
  const Vector probe{pred.x1, pred.y1, pred.x2, pred.y2};
  const auto as_box = [](std::span<const double> x) { return BoxXYXY{x[0], x[1], x[2], x[3]}; };
  ScalarFunction l1 = [=](std::span<const double> x) { return localization_loss(as_box(x), target, image).l1; };
  ScalarFunction gi = [=](std::span<const double> x) { return localization_loss(as_box(x), target, image).giou; };
  return ProbeSpecs{{"localization_loss.l1", std::move(l1), Vector(g.l1.begin(), g.l1.end()), probe},
                    {"localization_loss.giou", std::move(gi), Vector(g.giou.begin(), g.giou.end()), probe}};
}

// ------------------------------------------------------------ driver

using ProbeBuilder = std::function<std::optional<ProbeSpecs>(Draw&)>;

bool resolvable(const Vector& numeric) {
  return std::all_of(numeric.begin(), numeric.end(),
                     [](double n) { return n == 0.0 || std::abs(n) >= kResolvableDerivative; });
}

/// Draws probes until one is smooth and resolvable, then compares every block.
void run_probe(const std::string& op, const ProbeBuilder& build, Draw& d, double step,
               std::vector<GradCheckReport>& out) {
  for (int attempt = 0; attempt < kMaxRedraws; ++attempt) {
    auto specs = build(d);
    if (!specs) continue;
    std::vector<Vector> numeric;
    bool ok = true;
    for (const auto& s : *specs) {
      numeric.push_back(central_difference(s.name, s.f, s.probe, step));
      if (!resolvable(numeric.back())) {
        ok = false;
        break;
      }
    }
    if (!ok) continue;
    for (std::size_t i = 0; i < specs->size(); ++i) {
      const auto& s = (*specs)[i];
      out.push_back(compare_gradients(s.name, s.analytic, numeric[i], step));
    }
    return;
  }
  throw Error("gradcheck: no admissible probe for " + op + " after " + std::to_string(kMaxRedraws) +
              " draws");
}

}  // namespace

const std::vector<std::string>& gradcheck_ops() {
  static const std::vector<std::string> ops{
      "generate_channel_filter", "adapt_filter",        "static_group_mix",  "cascade_channel_mix",
      "sample_points",           "focal_loss_multihot", "localization_loss"};
  return ops;
}

bool GradCheckSuite::passed() const {
  return std::all_of(blocks.begin(), blocks.end(),
                     [&](const GradCheckReport& b) { return b.max_rel_error < tolerance; });
}

double GradCheckSuite::max_rel_error() const {
  double m = 0.0;
  for (const auto& b : blocks) m = std::max(m, b.max_rel_error);
  return m;
}

GradCheckSuite run_gradcheck(const std::string& op, std::uint64_t seed, double step, double tolerance) {
  if (!(step > 0.0) || !std::isfinite(step)) throw InvalidArgument("gradcheck: step must be positive");
  const auto& ops = gradcheck_ops();
  if (op != "all" && std::find(ops.begin(), ops.end(), op) == ops.end()) {
    throw InvalidArgument("gradcheck: unknown op '" + op + "'");
  }
  GradCheckSuite suite{seed, step, tolerance, {}};
  for (std::size_t i = 0; i < ops.size(); ++i) {
    if (op != "all" && op != ops[i]) continue;
    Draw d(derive_seed(seed, 100 + i));
    auto& out = suite.blocks;
    switch (i) {
      case 0: run_probe(ops[i], generator_probe, d, step, out); break;
      case 1: run_probe(ops[i], adapter_probe, d, step, out); break;
      case 2: run_probe(ops[i], static_probe, d, step, out); break;
      case 3:
        for (int reused = 0; reused <= 4; ++reused) {
          run_probe(ops[i], [reused](Draw& dr) { return cascade_probe(dr, reused); }, d, step, out);
        }
        break;
      case 4: run_probe(ops[i], sampler_probe, d, step, out); break;
      case 5: run_probe(ops[i], focal_probe, d, step, out); break;
      case 6: run_probe(ops[i], localization_probe, d, step, out); break;
    }
  }
  return suite;
}

}  // namespace xstage
