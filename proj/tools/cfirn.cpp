// Command-line entry point. Exit codes: 0 success, 1 validation error
// (bad config, malformed input), 2 runtime failure.

#include <CLI11.hpp>

#include <csignal>
#include <fstream>
#include <iostream>

#include "cfirn/ablation.hpp"
#include "cfirn/error.hpp"
#include "cfirn/hash.hpp"
#include "cfirn/retrieval.hpp"
#include "cfirn/service.hpp"
#include "cfirn/trainer.hpp"
#include "cfirn/version.hpp"

using namespace cfirn;
using nlohmann::json;

namespace {

struct ConfigArgs {
  std::string config_path;
  std::string preset = "full";
  std::vector<std::string> sets;
  std::optional<int> epochs;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> backbone;

  void add(CLI::App* app) {
    app->add_option("--config", config_path, "config file (key = value lines)");
    app->add_option("--preset", preset, "base values before the config file")
        ->check(CLI::IsMember({"full", "desk"}));
    app->add_option("--set", sets, "extra key=value override, repeatable");
    app->add_option("--epochs", epochs);
    app->add_option("--seed", seed);
    app->add_option("--backbone", backbone);
  }

  /// preset < config file < --set < dedicated flags.
  TrainConfig resolve() const {
    TrainConfig c = preset == "desk" ? TrainConfig::desk() : TrainConfig::full();
    if (!config_path.empty()) c.merge_json(read_config_file(config_path));
    for (const std::string& s : sets) c.merge_json(parse_config_text(s));
    if (epochs) c.epochs = *epochs;
    if (seed) c.seed = *seed;
    if (backbone) c.backbone = *backbone;
    c.validate();
    return c;
  }
};

void write_json(const std::string& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << j.dump(2) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cross-font glyph retrieval"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  // generate
  auto* gen = app.add_subcommand("generate", "write a synthetic cross-font glyph corpus");
  int g_classes = 20, g_per_font = 5, g_size = 128;
  std::uint64_t g_seed = 42;
  double g_flip = SynthOptions{}.query_flip_probability;
  std::string g_out;
  gen->add_option("--classes", g_classes)->check(CLI::PositiveNumber);
  gen->add_option("--per-font", g_per_font)->check(CLI::PositiveNumber);
  gen->add_option("--seed", g_seed);
  gen->add_option("--image-size", g_size)->check(CLI::PositiveNumber);
  gen->add_option("--query-flip", g_flip)->check(CLI::Range(0.0, 1.0));
  gen->add_option("--out", g_out)->required();

  // train
  auto* tr = app.add_subcommand("train", "train a model");
  ConfigArgs t_cfg;
  std::string t_manifest, t_out;
  bool t_det = false, t_quiet = false;
  tr->add_option("--manifest", t_manifest)->required();
  tr->add_option("--out", t_out)->required();
  tr->add_flag("--deterministic", t_det, "single-threaded, bitwise reproducible");
  tr->add_flag("--quiet", t_quiet);
  t_cfg.add(tr);

  // embed
  auto* em = app.add_subcommand("embed", "write an embedding dump");
  std::string e_ck, e_manifest, e_out, e_split = "all", e_font = "all";
  em->add_option("--checkpoint", e_ck)->required();
  em->add_option("--manifest", e_manifest)->required();
  em->add_option("--out", e_out)->required();
  em->add_option("--split", e_split)->check(CLI::IsMember({"all", "train", "test"}));
  em->add_option("--font", e_font)->check(CLI::IsMember({"all", "query", "gallery"}));

  // eval
  auto* ev = app.add_subcommand("eval", "class-disjoint retrieval evaluation");
  std::string v_ck, v_manifest, v_report;
  ev->add_option("--checkpoint", v_ck)->required();
  ev->add_option("--manifest", v_manifest)->required();
  ev->add_option("--report", v_report);

  // serve
  auto* sv = app.add_subcommand("serve", "HTTP query service");
  std::string s_ck, s_gallery, s_root, s_labels;
  ServiceOptions s_opts;
  sv->add_option("--checkpoint", s_ck)->required();
  sv->add_option("--gallery", s_gallery)->required();
  sv->add_option("--host", s_opts.host);
  auto* s_port = sv->add_option("--port", s_opts.port);
  auto* s_threads = sv->add_option("--threads", s_opts.threads);
  sv->add_option("--image-root", s_root, "directory gallery ids are relative to (thumbnails)");
  sv->add_option("--labels", s_labels, "TSV of class_id and display label");

  // ablate
  auto* ab = app.add_subcommand("ablate", "train and evaluate a toggle matrix");
  ConfigArgs a_cfg;
  std::string a_manifest, a_matrix = "components", a_rows, a_out, a_report;
  bool a_det = false;
  ab->add_option("--manifest", a_manifest)->required();
  ab->add_option("--matrix", a_matrix)->check(CLI::IsMember({"components", "resolutions", "all"}));
  ab->add_option("--rows", a_rows, "JSON file with [{name, overrides}] rows (replaces --matrix)");
  ab->add_option("--out", a_out);
  ab->add_option("--report", a_report);
  ab->add_flag("--deterministic", a_det);
  a_cfg.add(ab);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*gen) {
      SynthOptions opt;
      opt.image_size = g_size;
      opt.query_flip_probability = g_flip;
      const DatasetManifest m = synth_generate(g_classes, g_per_font, g_seed, g_out, opt);
      std::cout << json{{"manifest", (std::filesystem::path(g_out) / "manifest.tsv").string()},
                        {"entries", m.entries.size()},
                        {"classes", m.class_count},
                        {"checksum", m.checksum}}
                       .dump()
                << '\n';
    } else if (*tr) {
      const TrainConfig config = t_cfg.resolve();
      const DatasetManifest manifest = load_manifest(t_manifest);
      TrainOptions opt;
      opt.out_dir = t_out;
      opt.deterministic = t_det;
      opt.verbose = !t_quiet;
      const TrainResult r = train(config, manifest, opt);
      std::cout << json{{"checkpoint", (std::filesystem::path(t_out) / "model.ckpt").string()},
                        {"checkpoint_sha256", sha256_file(std::filesystem::path(t_out) / "model.ckpt")},
                        {"metrics", r.checkpoint.metrics}}
                       .dump()
                << '\n';
    } else if (*em) {
      const Checkpoint ck = load_checkpoint(e_ck);
      const DatasetManifest manifest = load_manifest(e_manifest);
      std::vector<ManifestEntry> entries;
      std::set<int> classes;
      if (e_split == "all") {
        for (int c : manifest.classes()) classes.insert(c);
      } else {
        const ClassSplit split = split_by_class(manifest, ck.config.holdout_fraction, ck.config.split_seed);
        classes = e_split == "train" ? split.train_classes : split.test_classes;
      }
      const auto font = e_font == "all" ? std::nullopt : parse_font_role(e_font);
      entries = select_entries(manifest, classes, font);
      const auto model = model_from_checkpoint(ck);
      const ExtractionResult r = extract_embeddings(*model, manifest, entries);
      write_embeddings(e_out, r.records);
      for (const std::string& s : r.skipped) std::cerr << "skipped " << s << '\n';
      std::cout << json{{"out", e_out},
                        {"records", r.records.size()},
                        {"skipped", r.skipped},
                        {"dimension", model->embedding_dim()},
                        {"sha256", sha256_file(e_out)}}
                       .dump()
                << '\n';
    } else if (*ev) {
      const Checkpoint ck = load_checkpoint(v_ck);
      const DatasetManifest manifest = load_manifest(v_manifest);
      const Evaluation e = evaluate(ck, manifest);
      std::cout << e.metrics.table();
      for (const std::string& s : e.skipped) std::cerr << "skipped " << s << '\n';
      json report = e.metrics.to_json();
      report["skipped"] = e.skipped;
      if (!v_report.empty()) write_json(v_report, report);
    } else if (*sv) {
      apply_env_overrides(s_opts, s_port->count() > 0, s_threads->count() > 0);
      if (!s_root.empty()) s_opts.image_root = s_root;
      if (!s_labels.empty()) s_opts.labels = load_labels(s_labels);
      auto model = std::shared_ptr<const CfirnModel>(model_from_checkpoint(load_checkpoint(s_ck)));
      auto index = std::make_shared<const RetrievalIndex>(read_embeddings(s_gallery));
      RetrievalService service(model, index, s_opts);
      service.run();
    } else if (*ab) {
      const TrainConfig base = a_cfg.resolve();
      const DatasetManifest manifest = load_manifest(a_manifest);
      std::vector<AblationRow> rows;
      if (!a_rows.empty()) {
        std::ifstream in(a_rows);
        if (!in) throw IoError("cannot open " + a_rows);
        try {
          rows = parse_ablation_rows(json::parse(in));
        } catch (const json::exception& e) {
          throw ParseError(std::string("ablation rows: ") + e.what());
        }
      } else {
        rows = ablation_matrix(a_matrix);
      }
      TrainOptions opt;
      if (!a_out.empty()) opt.out_dir = a_out;
      opt.deterministic = a_det;
      const AblationReport report = ablate(base, manifest, rows, opt);
      std::cout << report.table();
      if (!a_report.empty()) write_json(a_report, report.to_json());
      for (const auto& r : report.rows) {
        if (!r.ok) return 2;
      }
    }
  } catch (const Error& e) {
    std::cerr << e.what() << '\n';
    return e.is_validation() ? 1 : 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
