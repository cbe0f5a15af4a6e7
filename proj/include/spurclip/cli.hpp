#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "spurclip/spurclip.hpp"

namespace spurclip::cli {

namespace fs = std::filesystem;
using nlohmann::json;

struct SynthArgs {
  SynthConfig cfg;
  bool no_pretrained = false;
  bool maps = false;
  MapConfig map_cfg;
  std::string out;
};

struct TrainArgs {
  std::string data;
  std::string out;
  std::string loss = "clip";
  std::string preset;
  std::string init;
  std::string sampler = "shuffle";
  TrainConfig cfg;
};

struct DetectArgs {
  std::string data;
  std::string checkpoint;
  std::string split = "val";
  std::string out;
  RankOptions opt;
  std::size_t joint_dim = 16;
  std::uint64_t seed = 0;
};

struct EvalArgs {
  std::string data;
  std::string checkpoint;
  std::string split = "test";
  std::string attribute;
  std::string maps;
  std::string boxes;
  std::string out;
  std::size_t joint_dim = 16;
  std::uint64_t seed = 0;
};

struct AiouArgs {
  std::string data;
  std::string maps;
  std::string boxes;
  std::string split = "test";
  std::string attribute;
  std::string out;
};

inline void write_text(const fs::path& path, const std::string& text) {
  io::write_file_atomic(path, std::vector<char>(text.begin(), text.end()));
}

inline void write_json(const fs::path& path, const json& j) { write_text(path, dump_json(j)); }

inline void prepare_out(const std::string& out) {
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot create output directory " + out + ": " + ec.message());
}

/// Parameters from a checkpoint, or the dataset's initial projections.
inline ProjectionParams params_for(const Dataset& ds, const std::string& checkpoint, std::size_t joint_dim,
                                   std::uint64_t seed) {
  if (checkpoint.empty()) return ProjectionParams::initial(ds, joint_dim, seed);
  auto p = load_checkpoint(checkpoint).params;
  if (p.w_img.cols() != ds.images.cols() || p.w_txt.cols() != ds.texts.cols())
    throw Error(ErrorCode::DimensionMismatch, "checkpoint input widths do not match the dataset banks");
  return p;
}

inline std::string attribute_or_mitigated(const DatasetManifest& m, const std::string& attr) {
  if (!attr.empty()) {
    m.attribute_index(attr);
    return attr;
  }
  if (!m.mitigated_attribute) throw Error(ErrorCode::UnknownAttribute, "no --attribute given and manifest has no mitigated_attribute");
  return *m.mitigated_attribute;
}

inline void print_groups(std::ostream& os, const GroupAccuracies& g, const DatasetManifest& m) {
  os << std::left << std::setw(24) << "group" << std::right << std::setw(8) << "n" << std::setw(10) << "acc"
     << std::setw(10) << "n_train" << '\n';
  for (const auto& r : g.groups) {
    const std::string name = m.text_index.classes[r.key.label] + (r.key.attr_value ? " / s=1" : " / s=0");
    os << std::left << std::setw(24) << name << std::right << std::setw(8) << r.n_test << std::fixed
       << std::setprecision(4) << std::setw(10) << r.acc << std::setw(10) << r.n_train << '\n';
  }
  os << std::fixed << std::setprecision(4) << "average " << g.average_acc << "  adjusted " << g.adjusted_average_acc
     << "  worst " << g.worst_group_acc << '\n';
  os.unsetf(std::ios::fixed);
}

// ---------------------------------------------------------------------------

inline int cmd_synth(const SynthArgs& a, std::ostream& os) {
  SynthConfig cfg = a.cfg;
  if (a.no_pretrained) cfg.emit_pretrained = false;
  cfg.validate();
  if (a.maps) a.map_cfg.validate();
  prepare_out(a.out);
  const auto data = generate(cfg);
  const auto manifest_path = write_synth(a.out, data);
  json resolved{{"command", "synth"}, {"synth", to_json(cfg)}, {"maps", a.maps}};
  if (a.maps) {
    MapConfig mc = a.map_cfg;
    mc.seed = cfg.seed;
    const auto [bank, boxes] = plant_maps(mc, data.manifest);
    save_map_bank(fs::path(a.out) / "maps.spmb", bank);
    save_boxes(fs::path(a.out) / "boxes.json", boxes);
    resolved["map_config"] = {{"h", mc.h}, {"w", mc.w}, {"alignment", mc.default_alignment}};
  }
  write_json(fs::path(a.out) / "resolved_config.json", resolved);
  const auto& m = data.manifest;
  os << "wrote " << manifest_path.string() << ": " << m.examples().size() << " examples, " << m.attributes.size()
     << " attributes\n";
  for (Split s : {Split::train, Split::val, Split::test}) {
    os << to_string(s) << ':';
    for (const auto& [key, idx] : partition_groups(m, *m.mitigated_attribute, s))
      os << ' ' << m.text_index.classes[key.label] << (key.attr_value ? "/s=1=" : "/s=0=") << idx.size();
    os << '\n';
  }
  return 0;
}

inline int cmd_train(const TrainArgs& a, std::ostream& os) {
  TrainConfig cfg = a.cfg;
  cfg.loss_spec = a.preset.empty() ? LossSpec::parse(a.loss) : LossSpec::preset(a.preset);
  cfg.sampler = parse_sampler(a.sampler);
  cfg.validate();
  const Dataset ds = load_dataset(a.data);
  std::optional<ProjectionParams> init;
  if (!a.init.empty()) init = params_for(ds, a.init, cfg.joint_dim, cfg.seed);
  prepare_out(a.out);

  json resolved{{"command", "train"}, {"data", a.data}, {"init", a.init.empty() ? json(nullptr) : json(a.init)},
                {"train", to_json(cfg)}};
  write_json(fs::path(a.out) / "resolved_config.json", resolved);

  std::string log;
  os << std::left << std::setw(7) << "epoch" << std::right << std::setw(12) << "train_loss" << std::setw(10)
     << "val_worst" << std::setw(10) << "val_avg" << std::setw(10) << "best" << std::setw(8) << "degen" << '\n';
  const auto result = train(ds, cfg, init, [&](const EvalRecord& r) {
    log += to_json(r, ds.manifest).dump() + "\n";
    os << std::left << std::setw(7) << r.epoch << std::right << std::fixed << std::setprecision(4) << std::setw(12);
    if (r.train_loss) os << *r.train_loss;
    else os << "-";
    os << std::setw(10) << r.val.worst_group_acc << std::setw(10) << r.val.average_acc << std::setw(10)
       << r.best_val_worst_group << std::setw(8) << r.degenerate_batches << '\n';
    os.unsetf(std::ios::fixed);
  });
  log += summary_json(result).dump() + "\n";
  write_text(fs::path(a.out) / "train_log.jsonl", log);
  const auto& st = result.state;
  save_checkpoint(fs::path(a.out) / "best.spck", {st.best_params, st.best_epoch, st.rng_state});
  save_checkpoint(fs::path(a.out) / "last.spck", {st.params, st.epoch, st.rng_state});
  os << "best epoch " << st.best_epoch << " val worst-group " << std::fixed << std::setprecision(4)
     << st.best_worst_group_acc << '\n';
  os.unsetf(std::ios::fixed);
  return 0;
}

inline int cmd_detect(const DetectArgs& a, std::ostream& os) {
  if (a.opt.top_k < 1) throw Error(ErrorCode::InvalidConfig, "--top-k must be >= 1");
  if (a.opt.min_slice < 1) throw Error(ErrorCode::InvalidConfig, "--min-slice must be >= 1");
  const Split split = parse_split(a.split);
  const Dataset ds = load_dataset(a.data);
  const auto params = params_for(ds, a.checkpoint, a.joint_dim, a.seed);
  const auto preds = classify(params, ds, split);
  const auto ranked = rank_attributes(preds, ds.manifest, a.opt);
  prepare_out(a.out);
  write_json(fs::path(a.out) / "resolved_config.json",
             {{"command", "detect"},
              {"data", a.data},
              {"checkpoint", a.checkpoint.empty() ? json(nullptr) : json(a.checkpoint)},
              {"split", to_string(split)},
              {"per_class", a.opt.per_class},
              {"top_k", a.opt.top_k},
              {"min_slice", a.opt.min_slice}});
  write_json(fs::path(a.out) / "report.json",
             {{"split", to_string(split)}, {"per_class", a.opt.per_class}, {"ranking", report_to_json(ranked, ds.manifest)}});
  print_report_table(os, ranked, ds.manifest);
  return 0;
}

inline int cmd_eval(const EvalArgs& a, std::ostream& os) {
  const Split split = parse_split(a.split);
  if (a.maps.empty() != a.boxes.empty()) throw Error(ErrorCode::InvalidConfig, "--maps and --boxes go together");
  const Dataset ds = load_dataset(a.data);
  const std::string attr = attribute_or_mitigated(ds.manifest, a.attribute);
  const auto params = params_for(ds, a.checkpoint, a.joint_dim, a.seed);
  const auto acc = group_accuracies(classify(params, ds, split), ds.manifest, attr);
  json metrics{{"split", to_string(split)}, {"attribute", attr}, {"accuracy", to_json(acc, ds.manifest)}};
  std::optional<AiouSummary> aiou_s;
  if (!a.maps.empty())
    aiou_s = aiou_summary(load_map_bank(a.maps), load_boxes(a.boxes), ds.manifest, attr, split, acc.worst_group_key);
  if (aiou_s) metrics["aiou"] = to_json(*aiou_s, ds.manifest);
  prepare_out(a.out);
  write_json(fs::path(a.out) / "resolved_config.json",
             {{"command", "eval"},
              {"data", a.data},
              {"checkpoint", a.checkpoint.empty() ? json(nullptr) : json(a.checkpoint)},
              {"split", to_string(split)},
              {"attribute", attr},
              {"maps", a.maps.empty() ? json(nullptr) : json(a.maps)},
              {"boxes", a.boxes.empty() ? json(nullptr) : json(a.boxes)}});
  write_json(fs::path(a.out) / "metrics.json", metrics);
  print_groups(os, acc, ds.manifest);
  if (aiou_s)
    os << std::fixed << std::setprecision(4) << "aiou average " << aiou_s->average << "  worst " << aiou_s->worst_group
       << "  at accuracy-worst group " << *aiou_s->at_requested_group << '\n';
  os.unsetf(std::ios::fixed);
  return 0;
}

inline int cmd_aiou(const AiouArgs& a, std::ostream& os) {
  const Split split = parse_split(a.split);
  const auto m = load_manifest(a.data);
  const std::string attr = attribute_or_mitigated(m, a.attribute);
  const auto s = aiou_summary(load_map_bank(a.maps), load_boxes(a.boxes), m, attr, split);
  prepare_out(a.out);
  write_json(fs::path(a.out) / "resolved_config.json", {{"command", "aiou"},
                                                         {"data", a.data},
                                                         {"maps", a.maps},
                                                         {"boxes", a.boxes},
                                                         {"split", to_string(split)},
                                                         {"attribute", attr}});
  write_json(fs::path(a.out) / "aiou.json", {{"split", to_string(split)}, {"attribute", attr}, {"aiou", to_json(s, m)}});
  os << std::left << std::setw(24) << "group" << std::right << std::setw(10) << "aiou" << '\n';
  for (const auto& [key, v] : s.per_group)
    os << std::left << std::setw(24) << (m.text_index.classes[key.label] + (key.attr_value ? " / s=1" : " / s=0"))
       << std::right << std::fixed << std::setprecision(4) << std::setw(10) << v << '\n';
  os << "average " << s.average << "  worst " << s.worst_group << "  zero-denominator " << s.zero_denominator << '\n';
  os.unsetf(std::ios::fixed);
  return 0;
}

// ---------------------------------------------------------------------------

/// Builds the full command tree. Every option writes into `state`.
struct App {
  CLI::App app{"Spurious-aware fine-tuning of frozen two-tower embeddings", "spurclip"};
  SynthArgs synth;
  TrainArgs train;
  DetectArgs detect;
  EvalArgs eval;
  AiouArgs aiou;
  CLI::App* synth_cmd = nullptr;
  CLI::App* train_cmd = nullptr;
  CLI::App* detect_cmd = nullptr;
  CLI::App* eval_cmd = nullptr;
  CLI::App* aiou_cmd = nullptr;

  App() {
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Show help for every subcommand");

    synth_cmd = app.add_subcommand("synth", "Generate a synthetic dataset with a planted spurious attribute");
    auto& sc = synth.cfg;
    synth_cmd->add_option("--out", synth.out, "Output directory")->required();
    synth_cmd->add_option("--seed", sc.seed, "Generator seed")->capture_default_str();
    synth_cmd->add_option("--scale", sc.scale, "Train count scale factor")->capture_default_str();
    synth_cmd->add_option("--alpha", sc.class_strength, "Class signal strength")->capture_default_str();
    synth_cmd->add_option("--beta", sc.attribute_strength, "Image attribute strength")->capture_default_str();
    synth_cmd->add_option("--gamma", sc.text_attribute_strength, "Text attribute strength")->capture_default_str();
    synth_cmd->add_option("--sigma", sc.noise_sigma, "Image noise level")->capture_default_str();
    synth_cmd->add_option("--template-jitter", sc.template_jitter, "Per-template text jitter")->capture_default_str();
    synth_cmd->add_option("--pretrained-shortcut", sc.pretrained_shortcut, "Shortcut strength of the emitted projections")
        ->capture_default_str();
    synth_cmd->add_flag("--no-pretrained", synth.no_pretrained, "Do not emit initial projections");
    synth_cmd->add_option("--templates", sc.n_templates, "Prompt templates per class")->capture_default_str();
    synth_cmd->add_option("--decoys", sc.n_decoys, "Decoy attributes")->capture_default_str();
    synth_cmd->add_option("--val-per-group", sc.val_per_group, "Validation examples per group")->capture_default_str();
    synth_cmd->add_option("--test-per-group", sc.test_per_group, "Test examples per group")->capture_default_str();
    synth_cmd->add_flag("--maps", synth.maps, "Also write planted explanation maps and boxes");
    synth_cmd->add_option("--map-h", synth.map_cfg.h, "Map height")->capture_default_str();
    synth_cmd->add_option("--map-w", synth.map_cfg.w, "Map width")->capture_default_str();
    synth_cmd->add_option("--map-alignment", synth.map_cfg.default_alignment, "Map alignment with the box, in [0,1]")
        ->capture_default_str();

    train_cmd = app.add_subcommand("train", "Fine-tune the projections");
    auto& tc = train.cfg;
    train_cmd->add_option("--data", train.data, "Dataset manifest")->required()->check(CLI::ExistingFile);
    train_cmd->add_option("--out", train.out, "Output directory")->required();
    auto* loss = train_cmd->add_option("--loss", train.loss, "Loss terms, e.g. clip,vc,lc,vs or clip,lc=0.5")
                     ->capture_default_str();
    auto* preset = train_cmd->add_option("--preset", train.preset, "Ablation preset row1..row6")
                       ->check(CLI::IsMember(LossSpec::preset_names()));
    loss->excludes(preset);
    train_cmd->add_option("--lr", tc.learning_rate, "Learning rate")->capture_default_str();
    train_cmd->add_option("--wd", tc.weight_decay, "Weight decay")->capture_default_str();
    train_cmd->add_option("--batch", tc.batch_size, "Batch size (>= 2)")->capture_default_str();
    train_cmd->add_option("--epochs", tc.epochs, "Epochs")->capture_default_str();
    train_cmd->add_option("--seed", tc.seed, "Training seed")->capture_default_str();
    train_cmd->add_option("--sampler", train.sampler, "shuffle or group_balanced")
        ->check(CLI::IsMember({"shuffle", "group_balanced"}))
        ->capture_default_str();
    train_cmd->add_option("--eval-every", tc.eval_every, "Validation interval in epochs")->capture_default_str();
    train_cmd->add_flag("--freeze-temperature", tc.freeze_temperature, "Keep the temperature fixed");
    train_cmd->add_option("--joint-dim", tc.joint_dim, "Joint width for random initialization")->capture_default_str();
    train_cmd->add_option("--init", train.init, "Start from this checkpoint")->check(CLI::ExistingFile);

    detect_cmd = app.add_subcommand("detect", "Rank attributes by accuracy discrepancy");
    detect_cmd->add_option("--data", detect.data, "Dataset manifest")->required()->check(CLI::ExistingFile);
    detect_cmd->add_option("--checkpoint", detect.checkpoint, "Model checkpoint (default: initial projections)")
        ->check(CLI::ExistingFile);
    detect_cmd->add_option("--out", detect.out, "Output directory")->required();
    detect_cmd->add_option("--split", detect.split, "Split to score")->capture_default_str();
    detect_cmd->add_flag("--per-class", detect.opt.per_class, "Score every class separately");
    detect_cmd->add_option("--top-k", detect.opt.top_k, "Candidates kept (per class in per-class mode)")
        ->capture_default_str();
    detect_cmd->add_option("--min-slice", detect.opt.min_slice, "Minimum examples on each side of an attribute")
        ->capture_default_str();
    detect_cmd->add_option("--joint-dim", detect.joint_dim, "Joint width for random initialization")->capture_default_str();
    detect_cmd->add_option("--seed", detect.seed, "Seed for random initialization")->capture_default_str();

    eval_cmd = app.add_subcommand("eval", "Group accuracies, optionally with AIoU");
    eval_cmd->add_option("--data", eval.data, "Dataset manifest")->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--checkpoint", eval.checkpoint, "Model checkpoint (default: initial projections)")
        ->check(CLI::ExistingFile);
    eval_cmd->add_option("--out", eval.out, "Output directory")->required();
    eval_cmd->add_option("--split", eval.split, "Split to evaluate")->capture_default_str();
    eval_cmd->add_option("--attribute", eval.attribute, "Group attribute (default: mitigated attribute)");
    eval_cmd->add_option("--maps", eval.maps, "Explanation map bank")->check(CLI::ExistingFile);
    eval_cmd->add_option("--boxes", eval.boxes, "Box annotations")->check(CLI::ExistingFile);
    eval_cmd->add_option("--joint-dim", eval.joint_dim, "Joint width for random initialization")->capture_default_str();
    eval_cmd->add_option("--seed", eval.seed, "Seed for random initialization")->capture_default_str();

    aiou_cmd = app.add_subcommand("aiou", "AIoU summary of a map bank against boxes");
    aiou_cmd->add_option("--data", aiou.data, "Dataset manifest")->required()->check(CLI::ExistingFile);
    aiou_cmd->add_option("--maps", aiou.maps, "Explanation map bank")->required()->check(CLI::ExistingFile);
    aiou_cmd->add_option("--boxes", aiou.boxes, "Box annotations")->required()->check(CLI::ExistingFile);
    aiou_cmd->add_option("--out", aiou.out, "Output directory")->required();
    aiou_cmd->add_option("--split", aiou.split, "Split to summarize")->capture_default_str();
    aiou_cmd->add_option("--attribute", aiou.attribute, "Group attribute (default: mitigated attribute)");
  }

  int dispatch(std::ostream& os) {
    if (*synth_cmd) return cmd_synth(synth, os);
    if (*train_cmd) return cmd_train(train, os);
    if (*detect_cmd) return cmd_detect(detect, os);
    if (*eval_cmd) return cmd_eval(eval, os);
    return cmd_aiou(aiou, os);
  }
};

/// Exit codes: 0 success, 1 validation error, 2 runtime error.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  App a;
  try {
    a.app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << a.app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << a.app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  try {
    return a.dispatch(out);
  } catch (const Error& e) {
    err << "error [" << to_string(e.code()) << "]: " << e.what() << '\n';
    return is_validation_error(e.code()) ? 1 : 2;
  } catch (const nlohmann::json::exception& e) {
    err << "error [ParseError]: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
}

}  // namespace spurclip::cli
