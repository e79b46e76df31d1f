#include "xstage/harness.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include <json.hpp>

#include "xstage/error.hpp"

namespace xstage {

using Json = nlohmann::ordered_json;

AssignReport run_assign(const Scenario& scenario, const AssignerConfig& config,
                        const CostWeights& weights, InstabilityMode mode) {
  if (config.num_classes != scenario.num_classes()) {
    throw InvalidArgument("assign: config has " + std::to_string(config.num_classes) +
                          " classes, scenario has " + std::to_string(scenario.num_classes()));
  }
  AssignReport report;
  report.config = config;
  report.weights = weights;
  report.instability_mode = mode;
  report.result = assign_all_stages(scenario.predictions, scenario.ground_truths, config, weights,
                                    scenario.image);
  for (int s = 1; s <= config.num_stages; ++s) {
    const auto& targets = report.result.targets[static_cast<std::size_t>(s - 1)];
    report.losses.push_back(stage_loss(scenario.predictions.stage(s), targets, scenario.ground_truths,
                                       weights, scenario.image));
    report.pos_count.push_back(targets.positives());
  }
  report.instability = config.num_stages >= 2 ? instability(report.result.trace, mode) : 0.0;
  return report;
}

FlopsTable run_flops(const DecoderConfig& config) {
  config.validate();
  FlopsTable t;
  t.config = config;
  t.steady = flops_report(config, config.points_in);
  t.adapter_params = adapter_param_count(config);
  t.generator_params = generator_param_count(config);
  t.static_params = static_mix_param_count(config.points_in, config.group_channels);
  const std::int64_t dc2 = static_cast<std::int64_t>(config.group_channels) * config.group_channels;
  const auto row = [&](int stage, int points) {
    return FlopsStageRow{stage,
                         points,
                         spatial_group_size(points),
                         flops_report(config, points),
                         static_mix_param_count(points, config.group_channels),
                         3 * static_cast<std::int64_t>(points) * dc2};
  };
  for (int i = 1; i <= config.num_stages; ++i) t.stages.push_back(row(i, config.points_at(i)));
  for (int p : {8, 16, 32, 64, 128}) t.sweep.push_back(row(0, p));
  return t;
}

NmsReport run_nms(const Scenario& scenario, double threshold, int stage) {
  if (!(threshold > 0.0 && threshold <= 1.0)) {
    throw InvalidArgument("nms: IoU threshold must lie in (0, 1]");
  }
  NmsReport r;
  r.stage = stage == 0 ? scenario.num_stages() : stage;
  r.threshold = threshold;
  for (const auto& p : scenario.predictions.stage(r.stage)) {
    const auto best = std::max_element(p.class_scores.begin(), p.class_scores.end());
    r.candidates.push_back({p.box, static_cast<int>(best - p.class_scores.begin()), *best});
  }
  r.kept = nms(r.candidates, threshold);
  return r;
}

namespace {

void require_finite(const Json& j, const std::string& path) {
  if (j.is_number_float() && !std::isfinite(j.get<double>())) {
    throw InvalidArgument("report: metric '" + path + "' is not finite");
  }
  if (j.is_object()) {
    for (const auto& [k, v] : j.items()) require_finite(v, path.empty() ? k : path + "." + k);
  } else if (j.is_array()) {
    for (std::size_t i = 0; i < j.size(); ++i) require_finite(j[i], path + "[" + std::to_string(i) + "]");
  }
}

Json header(const RunInfo& info) {
  Json j;
  j["schema"] = "xstage-report";
  j["schema_version"] = kReportSchemaVersion;
  j["command"] = info.command;
  j["seed"] = info.seed;
  j["source"] = info.source;
  return j;
}

std::string finish(const Json& j) {
  require_finite(j, "");
  return j.dump(2) + "\n";
}

Json box_json(const BoxXYXY& b) { return Json::array({b.x1, b.y1, b.x2, b.y2}); }

Json decoder_json(const DecoderConfig& c) {
  return Json{{"num_stages", c.num_stages},
              {"num_queries", c.num_queries},
              {"content_dim", c.content_dim},
              {"groups", c.groups},
              {"group_channels", c.group_channels},
              {"points_in", c.points_in},
              {"points_in_first", c.points_in_first},
              {"out_points_factor", c.out_points_factor},
              {"max_reused_channel", c.max_reused_channel},
              {"reused_spatial", c.reused_spatial},
              {"channel_reuse_start", c.channel_reuse_start},
              {"spatial_reuse_start", c.spatial_reuse_start},
              {"num_classes", c.num_classes}};
}

Json assign_json(const AssignReport& r, const Scenario& s, const RunInfo& info) {
  Json j = header(info);
  j["scenario"] = {{"image", {s.image.width, s.image.height}},
                   {"classes", s.num_classes()},
                   {"stages", s.num_stages()},
                   {"queries", s.num_queries()},
                   {"ground_truths", s.ground_truths.size()}};
  j["config"] = {
      {"scope", {r.config.scope.lo.to_string(), r.config.scope.hi.to_string()}},
      {"iou_threshold", r.config.iou_threshold},
      {"weights",
       {{"cls", r.weights.cls},
        {"l1", r.weights.l1},
        {"giou", r.weights.giou},
        {"focal_alpha", r.weights.focal_alpha},
        {"focal_gamma", r.weights.focal_gamma}}},
      {"instability_mode",
       r.instability_mode == InstabilityMode::Consecutive ? "consecutive" : "against_final"}};

  Json loss{{"cls", Json::array()}, {"l1", Json::array()}, {"giou", Json::array()}, {"total", Json::array()}};
  for (const auto& l : r.losses) {
    loss["cls"].push_back(l.classification);
    loss["l1"].push_back(l.l1);
    loss["giou"].push_back(l.giou);
    loss["total"].push_back(l.total);
  }
  j["metrics"] = {{"instability", r.instability}, {"pos_count", r.pos_count}, {"loss", loss}};

  Json stages = Json::array();
  for (int i = 1; i <= r.config.num_stages; ++i) {
    const auto idx = static_cast<std::size_t>(i - 1);
    const auto& m = r.result.trace.stage(i);
    const auto [lo, hi] = r.config.scope.window(i, r.config.num_stages);
    Json matches = Json::array();
    for (std::size_t t = 0; t < m.gt_to_query.size(); ++t) {
      if (m.gt_to_query[t]) matches.push_back({t, *m.gt_to_query[t]});
    }
    Json bags = Json::array();
    const auto& per_query = r.result.bags[idx].per_query;
    for (std::size_t q = 0; q < per_query.size(); ++q) {
      if (!per_query[q].empty()) {
        bags.push_back({{"query", q}, {"gts", Json(std::vector<int>(per_query[q].begin(), per_query[q].end()))}});
      }
    }
    Json targets = Json::array();
    const auto& tg = r.result.targets[idx];
    for (std::size_t q = 0; q < tg.classes.size(); ++q) {
      std::vector<int> cats;
      for (std::size_t c = 0; c < tg.classes[q].size(); ++c)
        if (tg.classes[q][c] != 0.0) cats.push_back(static_cast<int>(c));
      if (cats.empty() && !tg.box_target[q]) continue;
      Json t{{"query", q}, {"classes", cats}};
      t["box_target"] = tg.box_target[q] ? Json(*tg.box_target[q]) : Json(nullptr);
      targets.push_back(std::move(t));
    }
    stages.push_back({{"stage", i},
                      {"window", {lo, hi}},
                      {"matches", matches},
                      {"unmatched_queries", m.unmatched_queries},
                      {"match_cost", m.total_cost},
                      {"bags", bags},
                      {"targets", targets}});
  }
  j["stages"] = std::move(stages);
  return j;
}

Json flops_row_json(const FlopsStageRow& r) {
  Json j;
  if (r.stage > 0) j["stage"] = r.stage;
  j["points_in"] = r.points_in;
  j["spatial_groups"] = r.spatial_groups;
  j["mix"] = r.flops.mixing;
  j["gen"] = r.flops.generation;
  j["ratio"] = r.flops.ratio;
  j["static_params"] = r.static_params;
  j["static_bound"] = r.static_bound;
  return j;
}

}  // namespace

std::string to_json(const AssignReport& report, const Scenario& scenario, const RunInfo& info) {
  return finish(assign_json(report, scenario, info));
}

std::string to_json(const AssignReport& report, const Scenario& scenario, const RunInfo& info,
                    const DecoderConfig& decoder, InitMode init) {
  Json j = assign_json(report, scenario, info);
  j["decoder"] = decoder_json(decoder);
  j["decoder"]["init"] = init == InitMode::Paper ? "paper" : "random";
  return finish(j);
}

std::string to_json(const FlopsTable& t, const RunInfo& info) {
  Json j = header(info);
  j["config"] = decoder_json(t.config);
  j["metrics"] = {{"flops", {{"mix", t.steady.mixing}, {"gen", t.steady.generation}, {"ratio", t.steady.ratio}}},
                  {"params",
                   {{"adapter", t.adapter_params},
                    {"generator", t.generator_params},
                    {"static", t.static_params}}}};
  Json stages = Json::array();
  for (const auto& r : t.stages) stages.push_back(flops_row_json(r));
  Json sweep = Json::array();
  for (const auto& r : t.sweep) sweep.push_back(flops_row_json(r));
  j["stages"] = std::move(stages);
  j["static_sweep"] = std::move(sweep);
  return finish(j);
}

std::string to_json(const NmsReport& r, const RunInfo& info) {
  Json j = header(info);
  j["config"] = {{"stage", r.stage}, {"iou_threshold", r.threshold}};
  j["metrics"] = {{"nms", {{"pre", r.candidates.size()}, {"post", r.kept.size()}}}};
  Json kept = Json::array();
  for (std::size_t i : r.kept) {
    const auto& c = r.candidates[i];
    kept.push_back({{"query", i}, {"category", c.category}, {"score", c.score}, {"box", box_json(c.box)}});
  }
  j["kept"] = std::move(kept);
  return finish(j);
}

std::string to_json(const GradCheckSuite& s, const RunInfo& info) {
  Json j = header(info);
  j["config"] = {{"step", s.step}, {"tolerance", s.tolerance}};
  j["metrics"] = {{"gradcheck", {{"max_rel_error", s.max_rel_error()}, {"passed", s.passed()}}}};
  Json blocks = Json::array();
  for (const auto& b : s.blocks) {
    blocks.push_back({{"block", b.op},
                      {"max_rel_error", b.max_rel_error},
                      {"worst", {b.worst.first, b.worst.second}},
                      {"analytic", b.worst_analytic},
                      {"numeric", b.worst_numeric},
                      {"passed", b.max_rel_error < s.tolerance}});
  }
  j["blocks"] = std::move(blocks);
  return finish(j);
}

}  // namespace xstage
