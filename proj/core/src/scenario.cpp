#include "xstage/scenario.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>

#include "xstage/error.hpp"

namespace xstage {

std::string format_double(double value) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, res.ptr);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer over (seed, stream)
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace {

std::vector<std::string> tokenize(const std::string& line) {
  std::string body = line.substr(0, line.find('#'));
  std::istringstream ss(body);
  std::vector<std::string> out;
  for (std::string tok; ss >> tok;) out.push_back(std::move(tok));
  return out;
}

long parse_int(const std::string& tok, const std::string& field, std::size_t line) {
  long v = 0;
  const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (res.ec != std::errc{} || res.ptr != tok.data() + tok.size()) {
    throw SchemaError(field, line, "expected an integer, got '" + tok + "'");
  }
  return v;
}

double parse_double(const std::string& tok, const std::string& field, std::size_t line) {
  double v = 0.0;
  const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (res.ec != std::errc{} || res.ptr != tok.data() + tok.size()) {
    throw SchemaError(field, line, "expected a number, got '" + tok + "'");
  }
  if (!std::isfinite(v)) throw SchemaError(field, line, "value must be finite, got '" + tok + "'");
  return v;
}

BoxXYXY parse_box(const std::vector<std::string>& toks, std::size_t first, const std::string& field,
                  std::size_t line) {
  const BoxXYXY box{parse_double(toks[first], field + ".x1", line),
                    parse_double(toks[first + 1], field + ".y1", line),
                    parse_double(toks[first + 2], field + ".x2", line),
                    parse_double(toks[first + 3], field + ".y2", line)};
  if (box.x1 > box.x2) throw SchemaError(field, line, "x1 > x2");
  if (box.y1 > box.y2) throw SchemaError(field, line, "y1 > y2");
  return box;
}

struct Header {
  std::optional<ImageSize> image;
  std::optional<long> classes;
  std::optional<long> stages;
  std::optional<long> queries;

  bool complete() const { return image && classes && stages && queries; }
};

void expect_count(const std::vector<std::string>& toks, std::size_t n, const std::string& field,
                  std::size_t line) {
  if (toks.size() != n) {
    throw SchemaError(field, line, "expected " + std::to_string(n - 1) + " values, got " +
                                       std::to_string(toks.size() - 1));
  }
}

long parse_positive(const std::string& tok, const std::string& field, std::size_t line) {
  const long v = parse_int(tok, field, line);
  if (v < 1) throw SchemaError(field, line, "must be >= 1");
  return v;
}

}  // namespace

Scenario parse_scenario(std::istream& in) {
  Header header;
  bool have_version = false;
  std::optional<Scenario> out;
  long next_stage = 1;
  long next_query = 0;
  std::size_t lineno = 0;

  const auto require_header = [&](const std::string& field) {
    if (!header.complete()) {
      throw SchemaError(field, lineno, "image, classes, stages and queries must precede records");
    }
    if (!out) {
      out.emplace();
      out->image = *header.image;
      out->predictions = PredictionTable(static_cast<int>(*header.stages),
                                         static_cast<int>(*header.queries),
                                         static_cast<int>(*header.classes));
    }
  };

  for (std::string line; std::getline(in, line);) {
    ++lineno;
    const auto toks = tokenize(line);
    if (toks.empty()) continue;
    const std::string& key = toks[0];
    if (!have_version) {
      if (key != "xstage-scenario" || toks.size() != 2) {
        throw SchemaError("version", lineno, "expected 'xstage-scenario <version>' first");
      }
      if (parse_int(toks[1], "version", lineno) != kScenarioSchemaVersion) {
        throw SchemaError("version", lineno,
                          "unsupported version " + toks[1] + ", expected " +
                              std::to_string(kScenarioSchemaVersion));
      }
      have_version = true;
      continue;
    }
    const auto header_field = [&](auto& slot, const std::string& name) {
      if (out) throw SchemaError(name, lineno, "header after records");
      if (slot) throw SchemaError(name, lineno, "duplicate header");
    };
    if (key == "image") {
      header_field(header.image, "image");
      expect_count(toks, 3, "image", lineno);
      const ImageSize img{parse_double(toks[1], "image.width", lineno),
                          parse_double(toks[2], "image.height", lineno)};
      if (!(img.width > 0.0)) throw SchemaError("image.width", lineno, "must be positive");
      if (!(img.height > 0.0)) throw SchemaError("image.height", lineno, "must be positive");
      header.image = img;
    } else if (key == "classes") {
      header_field(header.classes, "classes");
      expect_count(toks, 2, "classes", lineno);
      header.classes = parse_positive(toks[1], "classes", lineno);
    } else if (key == "stages") {
      header_field(header.stages, "stages");
      expect_count(toks, 2, "stages", lineno);
      header.stages = parse_positive(toks[1], "stages", lineno);
    } else if (key == "queries") {
      header_field(header.queries, "queries");
      expect_count(toks, 2, "queries", lineno);
      header.queries = parse_int(toks[1], "queries", lineno);
      if (*header.queries < 0) throw SchemaError("queries", lineno, "must be >= 0");
    } else if (key == "gt") {
      require_header("gt");
      expect_count(toks, 7, "gt", lineno);
      const long index = parse_int(toks[1], "gt.index", lineno);
      const auto expected = static_cast<long>(out->ground_truths.size());
      const std::string field = "gt[" + std::to_string(expected) + "]";
      if (index != expected) {
        throw SchemaError(field + ".index", lineno,
                          "index gap: expected " + std::to_string(expected) + ", got " + toks[1]);
      }
      const long cat = parse_int(toks[2], field + ".category", lineno);
      if (cat < 0 || cat >= *header.classes) {
        throw SchemaError(field + ".category", lineno,
                          "outside [0, " + std::to_string(*header.classes) + ")");
      }
      out->ground_truths.push_back({parse_box(toks, 3, field + ".box", lineno), static_cast<int>(cat)});
    } else if (key == "pred") {
      require_header("pred");
      const auto classes = static_cast<std::size_t>(*header.classes);
      expect_count(toks, 7 + classes, "pred", lineno);
      if (next_stage > *header.stages) {
        throw SchemaError("pred", lineno, "more records than stages x queries");
      }
      const long stage = parse_int(toks[1], "pred.stage", lineno);
      const long query = parse_int(toks[2], "pred.query", lineno);
      if (stage != next_stage || query != next_query) {
        throw SchemaError("pred.index", lineno,
                          "index gap: expected stage " + std::to_string(next_stage) + " query " +
                              std::to_string(next_query) + ", got stage " + toks[1] + " query " +
                              toks[2]);
      }
      const std::string field = "pred[" + toks[1] + "][" + toks[2] + "]";
      Prediction p;
      p.stage = static_cast<int>(stage);
      p.query_index = static_cast<int>(query);
      p.box = parse_box(toks, 3, field + ".box", lineno);
      p.class_scores.resize(classes);
      for (std::size_t c = 0; c < classes; ++c) {
        const std::string sf = field + ".score[" + std::to_string(c) + "]";
        const double v = parse_double(toks[7 + c], sf, lineno);
        if (v < 0.0 || v > 1.0) throw SchemaError(sf, lineno, "probability outside [0, 1]");
        p.class_scores[c] = v;
      }
      out->predictions.set(std::move(p));
      if (++next_query == *header.queries) {
        next_query = 0;
        ++next_stage;
      }
    } else {
      throw SchemaError(key, lineno, "unknown record '" + key + "'");
    }
  }

  if (!have_version) throw SchemaError("version", lineno, "empty scenario");
  if (!out) {
    require_header("header");
  }
  if (*header.queries > 0 && next_stage <= *header.stages) {
    throw SchemaError("pred", lineno,
                      "missing pred for stage " + std::to_string(next_stage) + " query " +
                          std::to_string(next_query));
  }
  return std::move(*out);
}

Scenario load_scenario(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open scenario '" + path.string() + "'");
  return parse_scenario(in);
}

void write_scenario(std::ostream& out, const Scenario& s) {
  out << "xstage-scenario " << kScenarioSchemaVersion << '\n'
      << "image " << format_double(s.image.width) << ' ' << format_double(s.image.height) << '\n'
      << "classes " << s.num_classes() << '\n'
      << "stages " << s.num_stages() << '\n'
      << "queries " << s.num_queries() << '\n';
  const auto box = [&](const BoxXYXY& b) {
    out << ' ' << format_double(b.x1) << ' ' << format_double(b.y1) << ' ' << format_double(b.x2)
        << ' ' << format_double(b.y2);
  };
  for (std::size_t t = 0; t < s.ground_truths.size(); ++t) {
    out << "gt " << t << ' ' << s.ground_truths[t].category;
    box(s.ground_truths[t].box);
    out << '\n';
  }
  for (const auto& p : s.predictions.all()) {
    out << "pred " << p.stage << ' ' << p.query_index;
    box(p.box);
    for (double c : p.class_scores) out << ' ' << format_double(c);
    out << '\n';
  }
}

void save_scenario(const std::filesystem::path& path, const Scenario& scenario) {
  std::ofstream out(path);
  if (!out) throw InvalidArgument("cannot write scenario '" + path.string() + "'");
  write_scenario(out, scenario);
  if (!out) throw InvalidArgument("failed writing scenario '" + path.string() + "'");
}

namespace {

BoxXYXY random_box(ImageSize image, std::mt19937_64& rng) {
  const double min_side = std::min(8.0, 0.25 * std::min(image.width, image.height));
  std::uniform_real_distribution<double> uw(min_side, std::max(min_side, image.width / 2));
  std::uniform_real_distribution<double> uh(min_side, std::max(min_side, image.height / 2));
  const double w = uw(rng);
  const double h = uh(rng);
  const double x1 = std::uniform_real_distribution<double>(0.0, image.width - w)(rng);
  const double y1 = std::uniform_real_distribution<double>(0.0, image.height - h)(rng);
  return {x1, y1, x1 + w, y1 + h};
}

std::vector<GroundTruth> random_ground_truths(int count, int num_classes, ImageSize image,
                                              std::mt19937_64& rng) {
  std::uniform_int_distribution<int> cat(0, num_classes - 1);
  std::vector<GroundTruth> out;
  for (int t = 0; t < count; ++t) {
    const auto box = random_box(image, rng);
    out.push_back({box, cat(rng)});
  }
  return out;
}

void check_image(ImageSize image) {
  if (!(image.width > 0.0) || !(image.height > 0.0) || !std::isfinite(image.width) ||
      !std::isfinite(image.height)) {
    throw InvalidArgument("image size must be positive and finite");
  }
}

}  // namespace

Scenario random_scenario(const RandomScenarioOptions& o, std::uint64_t seed) {
  if (o.num_stages < 1 || o.num_queries < 0 || o.num_gts < 0 || o.num_classes < 1) {
    throw InvalidArgument("random_scenario: need >= 1 stage, >= 0 queries, >= 0 gts, >= 1 class");
  }
  check_image(o.image);
  std::mt19937_64 rng(seed);
  Scenario s;
  s.image = o.image;
  s.ground_truths = random_ground_truths(o.num_gts, o.num_classes, o.image, rng);
  s.predictions = PredictionTable(o.num_stages, o.num_queries, o.num_classes);

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> signed_unit(-1.0, 1.0);
  std::vector<BoxXYXY> anchors;
  std::vector<int> anchor_category;
  for (int q = 0; q < o.num_queries; ++q) {
    if (o.num_gts > 0 && unit(rng) < 0.75) {
      const auto t = std::uniform_int_distribution<int>(0, o.num_gts - 1)(rng);
      anchors.push_back(s.ground_truths[static_cast<std::size_t>(t)].box);
      anchor_category.push_back(s.ground_truths[static_cast<std::size_t>(t)].category);
    } else {
      anchors.push_back(random_box(o.image, rng));
      anchor_category.push_back(-1);
    }
  }
  for (int stage = 1; stage <= o.num_stages; ++stage) {
    const double spread = 0.35 * (o.num_stages - stage + 1) / o.num_stages;
    for (int q = 0; q < o.num_queries; ++q) {
      const auto& a = anchors[static_cast<std::size_t>(q)];
      const double jw = spread * a.width();
      const double jh = spread * a.height();
      double x1 = a.x1 + jw * signed_unit(rng), x2 = a.x2 + jw * signed_unit(rng);
      double y1 = a.y1 + jh * signed_unit(rng), y2 = a.y2 + jh * signed_unit(rng);
      if (x1 > x2) std::swap(x1, x2);
      if (y1 > y2) std::swap(y1, y2);
      Prediction p;
      p.stage = stage;
      p.query_index = q;
      p.box = {std::clamp(x1, 0.0, o.image.width), std::clamp(y1, 0.0, o.image.height),
               std::clamp(x2, 0.0, o.image.width), std::clamp(y2, 0.0, o.image.height)};
      p.class_scores.resize(static_cast<std::size_t>(o.num_classes));
      for (double& c : p.class_scores) c = 0.5 * unit(rng);
      if (const int cat = anchor_category[static_cast<std::size_t>(q)]; cat >= 0) {
        p.class_scores[static_cast<std::size_t>(cat)] = 0.3 + 0.7 * unit(rng);
      }
      s.predictions.set(std::move(p));
    }
  }
  return s;
}

Scenario synthesize_scenario(const DecoderConfig& config, InitMode init, int num_gts, ImageSize image,
                             std::uint64_t seed) {
  config.validate();
  check_image(image);
  if (num_gts < 0) throw InvalidArgument("synthesize_scenario: negative ground-truth count");
  const auto params = init_parameters(config, derive_seed(seed, 1), init);
  const auto pyramid =
      make_random_pyramid(image, static_cast<std::size_t>(config.content_dim), derive_seed(seed, 2));

  Scenario s;
  s.image = image;
  std::mt19937_64 gt_rng(derive_seed(seed, 3));
  s.ground_truths = random_ground_truths(num_gts, config.num_classes, image, gt_rng);

  std::mt19937_64 rng(derive_seed(seed, 4));
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  const double z_lo = 4.0;
  const double z_hi = std::max(z_lo, std::log2(std::min(image.width, image.height) / 2.0));
  std::vector<QueryState> queries(static_cast<std::size_t>(config.num_queries));
  for (auto& q : queries) {
    q.content.resize(static_cast<std::size_t>(config.content_dim));
    for (double& v : q.content) v = unit(rng);
    q.box.x = std::uniform_real_distribution<double>(0.0, image.width)(rng);
    q.box.y = std::uniform_real_distribution<double>(0.0, image.height)(rng);
    q.box.z = std::uniform_real_distribution<double>(z_lo, z_hi)(rng);
    q.box.r = unit(rng);
  }
  s.predictions = run_decoder(params, queries, pyramid, image).predictions;
  return s;
}

}  // namespace xstage
