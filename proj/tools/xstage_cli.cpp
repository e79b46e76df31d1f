// Command-line front end: assign, simulate, gradcheck, flops, nms.
// Exit codes: 0 success, 1 input error, 2 gradient tolerance failure.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "xstage/error.hpp"
#include "xstage/harness.hpp"

namespace {

constexpr int kExitInput = 1;
constexpr int kExitTolerance = 2;

struct DecoderFlags {
  std::string preset;
  std::vector<std::pair<int xstage::DecoderConfig::*, std::optional<int>>> overrides;

  void attach(CLI::App* app, const std::string& default_preset) {
    preset = default_preset;
    app->add_option("--preset", preset, "Decoder shape preset")
        ->check(CLI::IsMember({"base", "desk"}))
        ->capture_default_str();
    const std::pair<const char*, int xstage::DecoderConfig::*> fields[] = {
        {"--num-stages", &xstage::DecoderConfig::num_stages},
        {"--num-queries", &xstage::DecoderConfig::num_queries},
        {"--content-dim", &xstage::DecoderConfig::content_dim},
        {"--groups", &xstage::DecoderConfig::groups},
        {"--group-channels", &xstage::DecoderConfig::group_channels},
        {"--points-in", &xstage::DecoderConfig::points_in},
        {"--points-in-first", &xstage::DecoderConfig::points_in_first},
        {"--out-points-factor", &xstage::DecoderConfig::out_points_factor},
        {"--max-reused-channel", &xstage::DecoderConfig::max_reused_channel},
        {"--reused-spatial", &xstage::DecoderConfig::reused_spatial},
        {"--channel-reuse-start", &xstage::DecoderConfig::channel_reuse_start},
        {"--spatial-reuse-start", &xstage::DecoderConfig::spatial_reuse_start},
        {"--num-classes", &xstage::DecoderConfig::num_classes},
    };
    overrides.reserve(std::size(fields));
    for (const auto& [name, member] : fields) {
      overrides.emplace_back(member, std::nullopt);
      app->add_option(name, overrides.back().second);
    }
  }

  xstage::DecoderConfig build() const {
    auto c = preset == "desk" ? xstage::DecoderConfig::desk() : xstage::DecoderConfig::base();
    for (const auto& [member, value] : overrides)
      if (value) c.*member = *value;
    c.validate();
    return c;
  }
};

struct AssignFlags {
  std::string scope_lo = "i-1";
  std::string scope_hi = "L";
  std::vector<double> iou_threshold{0.5};
  xstage::CostWeights weights;
  std::string instability = "consecutive";

  void attach(CLI::App* app) {
    app->add_option("--scope-lo", scope_lo, "Window start: integer, i[+-k] or L[-k]")->capture_default_str();
    app->add_option("--scope-hi", scope_hi, "Window end")->capture_default_str();
    app->add_option("--iou-threshold", iou_threshold, "Gate eta, one value or one per stage")
        ->capture_default_str();
    app->add_option("--w-cls", weights.cls)->capture_default_str();
    app->add_option("--w-l1", weights.l1)->capture_default_str();
    app->add_option("--w-giou", weights.giou)->capture_default_str();
    app->add_option("--focal-alpha", weights.focal_alpha)->capture_default_str();
    app->add_option("--focal-gamma", weights.focal_gamma)->capture_default_str();
    app->add_option("--instability", instability)
        ->check(CLI::IsMember({"consecutive", "against_final"}))
        ->capture_default_str();
  }

  xstage::AssignerConfig build(int num_stages, int num_classes) const {
    xstage::AssignerConfig c = xstage::AssignerConfig::uniform(
        num_stages, num_classes, iou_threshold.front(),
        {xstage::ScopeBound::parse(scope_lo), xstage::ScopeBound::parse(scope_hi)});
    if (iou_threshold.size() > 1) c.iou_threshold = iou_threshold;
    c.validate();
    return c;
  }

  xstage::InstabilityMode mode() const {
    return instability == "consecutive" ? xstage::InstabilityMode::Consecutive
                                        : xstage::InstabilityMode::AgainstFinal;
  }
};

struct ScenarioFlags {
  std::string path;
  xstage::RandomScenarioOptions random;
  std::string save;

  void attach(CLI::App* app) {
    app->add_option("--scenario", path, "Scenario file; without it a random scenario is generated");
    app->add_option("--num-stages", random.num_stages)->capture_default_str();
    app->add_option("--num-queries", random.num_queries)->capture_default_str();
    app->add_option("--num-gts", random.num_gts)->capture_default_str();
    app->add_option("--num-classes", random.num_classes)->capture_default_str();
    app->add_option("--image-width", random.image.width)->capture_default_str();
    app->add_option("--image-height", random.image.height)->capture_default_str();
    app->add_option("--save-scenario", save, "Write the scenario used to this path");
  }

  std::pair<xstage::Scenario, std::string> build(std::uint64_t seed) const {
    if (!path.empty()) return {xstage::load_scenario(path), path};
    return {xstage::random_scenario(random, seed),
            "random(stages=" + std::to_string(random.num_stages) +
                ",queries=" + std::to_string(random.num_queries) +
                ",gts=" + std::to_string(random.num_gts) +
                ",classes=" + std::to_string(random.num_classes) + ")"};
  }
};

void emit(const std::string& text, const std::string& out) {
  if (out.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream f(out, std::ios::binary);
  if (!f) throw xstage::InvalidArgument("cannot write report '" + out + "'");
  f << text;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-stage label assignment and dynamic-filter reuse toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  std::uint64_t seed = 0;
  std::string out;
  app.add_option("--seed", seed, "Seed for every random draw")->capture_default_str();
  app.add_option("-o,--out", out, "Write the report here instead of stdout");

  auto* assign = app.add_subcommand("assign", "Cross-stage label assignment on a scenario");
  ScenarioFlags assign_scenario;
  AssignFlags assign_flags;
  assign_scenario.attach(assign);
  assign_flags.attach(assign);

  auto* simulate = app.add_subcommand("simulate", "Decoder forward pass on a random pyramid, then assign");
  DecoderFlags sim_decoder;
  AssignFlags sim_assign;
  std::string init = "random";
  int sim_gts = 5;
  xstage::ImageSize sim_image{256.0, 192.0};
  std::string sim_save;
  sim_decoder.attach(simulate, "desk");
  sim_assign.attach(simulate);
  simulate->add_option("--init", init, "Parameter initialization")
      ->check(CLI::IsMember({"paper", "random"}))
      ->capture_default_str();
  simulate->add_option("--num-gts", sim_gts)->capture_default_str();
  simulate->add_option("--image-width", sim_image.width)->capture_default_str();
  simulate->add_option("--image-height", sim_image.height)->capture_default_str();
  simulate->add_option("--save-scenario", sim_save, "Write the synthesized scenario to this path");

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  std::string op = "all";
  double step = xstage::kGradCheckStep;
  double tolerance = xstage::kGradCheckTolerance;
  std::vector<std::string> op_names{"all"};
  for (const auto& name : xstage::gradcheck_ops()) op_names.push_back(name);
  gradcheck->add_option("--op", op, "Operation to check")->check(CLI::IsMember(op_names))->capture_default_str();
  gradcheck->add_option("--step", step)->capture_default_str();
  gradcheck->add_option("--tolerance", tolerance)->capture_default_str();

  auto* flops = app.add_subcommand("flops", "Closed-form FLOPs and parameter tables");
  DecoderFlags flops_decoder;
  flops_decoder.attach(flops, "base");

  auto* nms_cmd = app.add_subcommand("nms", "Greedy per-category NMS over one stage");
  ScenarioFlags nms_scenario;
  double nms_threshold = 0.5;
  int nms_stage = 0;
  nms_scenario.attach(nms_cmd);
  nms_cmd->add_option("--iou-threshold", nms_threshold)->capture_default_str();
  nms_cmd->add_option("--stage", nms_stage, "Stage to suppress; 0 = last")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitInput;
  }

  try {
    if (assign->parsed()) {
      const auto [scenario, source] = assign_scenario.build(seed);
      if (!assign_scenario.save.empty()) xstage::save_scenario(assign_scenario.save, scenario);
      const auto config = assign_flags.build(scenario.num_stages(), scenario.num_classes());
      const auto report = xstage::run_assign(scenario, config, assign_flags.weights, assign_flags.mode());
      emit(xstage::to_json(report, scenario, {"assign", seed, source}), out);
    } else if (simulate->parsed()) {
      const auto decoder = sim_decoder.build();
      const auto mode = init == "paper" ? xstage::InitMode::Paper : xstage::InitMode::Random;
      const auto scenario = xstage::synthesize_scenario(decoder, mode, sim_gts, sim_image, seed);
      if (!sim_save.empty()) xstage::save_scenario(sim_save, scenario);
      const auto config = sim_assign.build(scenario.num_stages(), scenario.num_classes());
      const auto report = xstage::run_assign(scenario, config, sim_assign.weights, sim_assign.mode());
      emit(xstage::to_json(report, scenario, {"simulate", seed, "decoder"}, decoder, mode), out);
    } else if (gradcheck->parsed()) {
      const auto suite = xstage::run_gradcheck(op, seed, step, tolerance);
      emit(xstage::to_json(suite, {"gradcheck", seed, op}), out);
      if (!suite.passed()) {
        for (const auto& b : suite.blocks) {
          if (b.max_rel_error >= tolerance) {
            std::cerr << "gradcheck: " << b.op << " max relative error " << b.max_rel_error
                      << " exceeds " << tolerance << "\n";
          }
        }
        return kExitTolerance;
      }
    } else if (flops->parsed()) {
      emit(xstage::to_json(xstage::run_flops(flops_decoder.build()), {"flops", seed, "config"}), out);
    } else if (nms_cmd->parsed()) {
      const auto [scenario, source] = nms_scenario.build(seed);
      if (!nms_scenario.save.empty()) xstage::save_scenario(nms_scenario.save, scenario);
      emit(xstage::to_json(xstage::run_nms(scenario, nms_threshold, nms_stage), {"nms", seed, source}), out);
    }
  } catch (const xstage::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInput;
  }
  return 0;
}
