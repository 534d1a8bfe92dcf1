// saeuron: command-line driver for the SAE unlearning pipeline.
//
//   saeuron synth     --out DIR
//   saeuron train     --manifest M --out DIR
//   saeuron score     --manifest M --checkpoint C --out DIR
//   saeuron select    --manifest M --checkpoint C --concept X --tau 1 --out DIR
//   saeuron unlearn   --manifest M --checkpoint C --concept X --tau 1 --gamma -1 --out DIR
//   saeuron steer     --manifest M --checkpoint C --concept X --tau 1 --gamma-plus 2 --out DIR
//   saeuron probe-knn --manifest M --checkpoint C --out DIR
//   saeuron stats     --manifest M --checkpoint C --out DIR
//   saeuron heatmap   --manifest M --checkpoint C --feature I --timestep T --out DIR
//
// Exit status: 0 success, 1 usage error, 2 data or integrity error.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "saeuron/saeuron.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace saeuron;

namespace {

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingFileError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + " is not valid JSON: " + e.what());
  }
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream ss;
  ss << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return ss.str();
}

// Inputs of a run: the manifest plus every shard it lists, and any extra files.
struct RunRecord {
  std::string command;
  std::vector<std::string> argv;
  std::vector<fs::path> inputs;
  json config = json::object();

  void add_dataset(const fs::path& manifest_path) {
    inputs.push_back(manifest_path);
    const auto m = read_manifest(manifest_path);
    for (const auto& s : m.shards) {
      fs::path p = s.path;
      inputs.push_back(p.is_relative() ? manifest_path.parent_path() / p : p);
    }
  }

  // Writes config.json and run_manifest.json; outputs are every other file in `out`.
  void finish(const fs::path& out) const {
    write_json(out / "config.json", config);
    json in = json::array();
    for (const auto& p : inputs) in.push_back({{"path", p.string()}, {"sha256", sha256_file(p)}});
    json outs = json::array();
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(out)) {
      if (e.is_regular_file() && e.path().filename() != "run_manifest.json") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& p : files) {
      outs.push_back({{"path", fs::relative(p, out).string()}, {"sha256", sha256_file(p)}});
    }
    write_json(out / "run_manifest.json", {{"command", command},
                                           {"argv", argv},
                                           {"inputs", in},
                                           {"outputs", outs},
                                           {"config", config},
                                           {"timestamp", utc_timestamp()}});
  }
};

std::vector<std::uint16_t> parse_timesteps(const std::string& spec, std::uint32_t T) {
  if (spec.empty() || spec == "all") return detail::all_timesteps(T);
  std::vector<std::uint16_t> out;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size()) throw ConfigError("bad timestep '" + item + "'");
    if (v >= T) throw ConfigError("timestep " + item + " outside [0, " + std::to_string(T) + ")");
    out.push_back(static_cast<std::uint16_t>(v));
  }
  return out;
}

// Applies `fn` to every feature map in the dataset and writes the results as a
// new dataset with the same record order, one output shard per input shard.
template <class Fn>
void transform_maps(const fs::path& manifest_path, const fs::path& out, Fn fn) {
  const auto data = open_dataset(manifest_path);
  Manifest m = data.manifest();
  const auto groups = group_images(data);
  std::map<std::uint32_t, std::vector<const ImageGroup*>> by_shard;
  for (const auto& g : groups) by_shard[g.shard].push_back(&g);

  fs::create_directories(out / "shards");
  for (std::uint32_t s = 0; s < m.shards.size(); ++s) {
    ShardHeader header;
    auto records = read_shard(data.shard_path(s), &header);
    for (const auto* g : by_shard[s]) {
      std::vector<ActivationRecord> rows;
      for (const auto& ref : g->rows) rows.push_back(records[ref.row]);
      if (rows.size() != static_cast<std::size_t>(m.h) * m.w) {
        throw DataError("shard " + std::to_string(s) + " holds an incomplete feature map at timestep " +
                        std::to_string(g->timestep));
      }
      const FeatureMap result = fn(FeatureMap::from_records(rows, m.h, m.w));
      for (const auto& ref : g->rows) {
        const auto src = result.row(records[ref.row].spatial_index);
        records[ref.row].values.assign(src.begin(), src.end());
      }
    }
    const std::string name = "shards/shard_" + std::to_string(s) + ".shard";
    write_shard(records, header, out / name);
    m.shards[s].path = name;
  }
  write_manifest(m, out / "manifest.json");
}

json selection_json(const FeatureSelection& sel) {
  return {{"features", sel.features}, {"scores", sel.scores}, {"truncated", sel.truncated}};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse-autoencoder concept unlearning toolkit"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  std::string manifest_path, checkpoint_path, out_dir, concept_arg, config_path, timesteps_arg = "all";
  std::string maps_path, plan_path;

  auto add_common = [&](CLI::App* sub, bool needs_manifest, bool needs_checkpoint) {
    auto* o = sub->add_option("--out", out_dir, "Output directory")->required();
    (void)o;
    if (needs_manifest) sub->add_option("--manifest", manifest_path, "Dataset manifest")->required();
    if (needs_checkpoint) sub->add_option("--checkpoint", checkpoint_path, "SAE checkpoint")->required();
  };

  // synth
  SyntheticConfig syn;
  SyntheticLayout layout;
  std::string cond_policy = "conditioned-only";
  auto* synth = app.add_subcommand("synth", "Generate a planted-dictionary dataset");
  add_common(synth, false, false);
  synth->add_option("--seed", syn.seed);
  synth->add_option("--d", syn.d);
  synth->add_option("--concepts", syn.num_concepts);
  synth->add_option("--atoms-per-concept", syn.atoms_per_concept);
  synth->add_option("--shared-atoms", syn.shared_atoms);
  synth->add_option("--shared-active", syn.shared_active);
  synth->add_option("--coef-mean", syn.coef_mean);
  synth->add_option("--coef-sigma", syn.coef_sigma);
  synth->add_option("--noise", syn.noise_sigma);
  synth->add_option("--ramp-start", syn.ramp_start);
  synth->add_option("--concept-atom-prob", syn.concept_atom_prob, "Chance each concept atom is present in a record");
  synth->add_option("--max-coherence", syn.max_coherence, "Bound on |cos| between atoms (>= 1 disables)");
  synth->add_option("--images-per-concept", layout.images_per_concept);
  synth->add_option("--height", layout.h);
  synth->add_option("--width", layout.w);
  synth->add_option("--timesteps", layout.T, "Number of simulated timesteps");
  synth->add_option("--cond-policy", cond_policy)->check(CLI::IsMember({"conditioned-only", "both"}));

  // train
  TrainConfig flags;
  std::string variant_arg, schedule_arg, normalize_arg;
  auto* train_cmd = app.add_subcommand("train", "Train a sparse autoencoder");
  add_common(train_cmd, true, false);
  train_cmd->add_option("--config", config_path, "JSON overlay of training settings; flags take precedence");
  auto* o_k = train_cmd->add_option("--k", flags.k);
  auto* o_kaux = train_cmd->add_option("--k-aux", flags.k_aux);
  auto* o_exp = train_cmd->add_option("--expansion", flags.expansion_factor);
  auto* o_alpha = train_cmd->add_option("--alpha", flags.alpha);
  auto* o_lr = train_cmd->add_option("--lr", flags.lr);
  auto* o_bs = train_cmd->add_option("--batch-size", flags.batch_size);
  auto* o_ep = train_cmd->add_option("--epochs", flags.epochs);
  auto* o_ms = train_cmd->add_option("--max-steps", flags.max_steps);
  auto* o_dt = train_cmd->add_option("--dead-threshold", flags.dead_threshold);
  auto* o_seed = train_cmd->add_option("--seed", flags.seed);
  auto* o_var = train_cmd->add_option("--variant", variant_arg)->check(CLI::IsMember({"relu", "topk", "batch-topk"}));
  auto* o_sch = train_cmd->add_option("--lr-schedule", schedule_arg)
                    ->check(CLI::IsMember({"constant", "linear-decay-to-zero"}));
  auto* o_norm = train_cmd->add_option("--normalize-input", normalize_arg)->check(CLI::IsMember({"none", "unit-norm"}));

  // score
  double delta = kDefaultScoreDelta;
  auto* score_cmd = app.add_subcommand("score", "Score every feature for every concept and timestep");
  add_common(score_cmd, true, true);
  score_cmd->add_option("--delta", delta);
  score_cmd->add_option("--concept", concept_arg, "Restrict to one concept (name or id)");

  // select
  std::size_t tau = 1;
  auto* select_cmd = app.add_subcommand("select", "Select the top-tau concept features per timestep");
  add_common(select_cmd, true, true);
  select_cmd->add_option("--concept", concept_arg)->required();
  select_cmd->add_option("--tau", tau);
  select_cmd->add_option("--timesteps", timesteps_arg, "Comma-separated list or 'all'");
  select_cmd->add_option("--delta", delta);

  // unlearn
  double gamma = -1.0;
  auto* unlearn_cmd = app.add_subcommand("unlearn", "Prepare an ablation plan and apply it to feature maps");
  add_common(unlearn_cmd, true, true);
  unlearn_cmd->add_option("--config", config_path, "JSON overlay with tau and gamma; flags take precedence");
  unlearn_cmd->add_option("--concept", concept_arg)->required();
  auto* o_tau = unlearn_cmd->add_option("--tau", tau);
  auto* o_gamma = unlearn_cmd->add_option("--gamma", gamma);
  unlearn_cmd->add_option("--timesteps", timesteps_arg, "Comma-separated list or 'all'");
  unlearn_cmd->add_option("--maps", maps_path, "Manifest of feature maps to ablate (default: --manifest)");
  unlearn_cmd->add_option("--plan", plan_path, "Use an existing plan instead of preparing one");
  unlearn_cmd->add_option("--delta", delta);

  // steer
  double gamma_plus = 1.0;
  auto* steer_cmd = app.add_subcommand("steer", "Add concept feature directions to feature maps");
  add_common(steer_cmd, true, true);
  steer_cmd->add_option("--concept", concept_arg)->required();
  steer_cmd->add_option("--tau", tau);
  steer_cmd->add_option("--gamma-plus", gamma_plus)->required();
  steer_cmd->add_option("--timesteps", timesteps_arg, "Comma-separated list or 'all'");
  steer_cmd->add_option("--maps", maps_path, "Manifest of feature maps to steer (default: --manifest)");
  steer_cmd->add_option("--delta", delta);

  // probe-knn
  std::uint32_t per_class = 2, k_neighbors = 5;
  double test_fraction = 0.5;
  std::uint64_t probe_seed = 0;
  auto* probe_cmd = app.add_subcommand("probe-knn", "k-NN classification on score-selected vs random features");
  add_common(probe_cmd, true, true);
  probe_cmd->add_option("--per-class", per_class, "Selected features per concept");
  probe_cmd->add_option("--k-neighbors", k_neighbors);
  probe_cmd->add_option("--test-fraction", test_fraction);
  probe_cmd->add_option("--seed", probe_seed);
  probe_cmd->add_option("--delta", delta);

  // stats
  std::string mode_arg = "per-sample";
  std::size_t stats_batch = 4096;
  auto* stats_cmd = app.add_subcommand("stats", "Active-latent counts per image and per patch");
  add_common(stats_cmd, true, true);
  stats_cmd->add_option("--mode", mode_arg)->check(CLI::IsMember({"per-sample", "batch"}));
  stats_cmd->add_option("--batch-size", stats_batch);

  // heatmap
  std::uint32_t feature = 0, image = 0;
  std::uint16_t timestep = 0;
  auto* heat_cmd = app.add_subcommand("heatmap", "Normalised per-patch activation of one feature");
  add_common(heat_cmd, true, true);
  heat_cmd->add_option("--feature", feature)->required();
  heat_cmd->add_option("--timestep", timestep);
  heat_cmd->add_option("--concept", concept_arg);
  heat_cmd->add_option("--image", image, "Image index within the concept");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  if (const char* env = std::getenv("SAEURON_THREADS")) {
    try {
      set_max_threads(static_cast<unsigned>(std::stoul(env)));
    } catch (const std::exception&) {
      std::cerr << "warning: ignoring SAEURON_THREADS=" << env << '\n';
    }
  }

  RunRecord run;
  run.argv.assign(argv, argv + argc);
  const fs::path out = out_dir;

  try {
    fs::create_directories(out);

    if (*synth) {
      run.command = "synth";
      layout.cond_policy = cond_policy_from_string(cond_policy);
      const auto gt = make_ground_truth(syn);
      const auto result = generate(gt, layout, out);
      for (const auto& w : result.warnings) std::cerr << "warning: " << w << '\n';
      run.config = {{"d", syn.d},
                    {"concepts", syn.num_concepts},
                    {"atoms_per_concept", syn.atoms_per_concept},
                    {"shared_atoms", syn.shared_atoms},
                    {"shared_active", syn.shared_active},
                    {"coef_mean", syn.coef_mean},
                    {"coef_sigma", syn.coef_sigma},
                    {"noise_sigma", syn.noise_sigma},
                    {"ramp_start", syn.ramp_start},
                    {"concept_atom_prob", syn.concept_atom_prob},
                    {"max_coherence", syn.max_coherence},
                    {"seed", syn.seed},
                    {"images_per_concept", layout.images_per_concept},
                    {"h", layout.h},
                    {"w", layout.w},
                    {"T", layout.T},
                    {"cond_policy", cond_policy}};
      std::cout << "wrote " << result.manifest_path.string() << '\n';
    } else if (*train_cmd) {
      run.command = "train";
      run.add_dataset(manifest_path);
      TrainConfig cfg;
      if (!config_path.empty()) {
        run.inputs.push_back(config_path);
        cfg = train_config_from_json(read_json(config_path), cfg);
      }
      if (o_k->count()) cfg.k = flags.k;
      if (o_kaux->count()) cfg.k_aux = flags.k_aux;
      if (o_exp->count()) cfg.expansion_factor = flags.expansion_factor;
      if (o_alpha->count()) cfg.alpha = flags.alpha;
      if (o_lr->count()) cfg.lr = flags.lr;
      if (o_bs->count()) cfg.batch_size = flags.batch_size;
      if (o_ep->count()) cfg.epochs = flags.epochs;
      if (o_ms->count()) cfg.max_steps = flags.max_steps;
      if (o_dt->count()) cfg.dead_threshold = flags.dead_threshold;
      if (o_seed->count()) cfg.seed = flags.seed;
      if (o_var->count()) cfg.variant = variant_from_string(variant_arg);
      if (o_sch->count()) cfg = train_config_from_json({{"lr_schedule", schedule_arg}}, cfg);
      if (o_norm->count()) cfg = train_config_from_json({{"normalize_input", normalize_arg}}, cfg);

      const auto data = open_dataset(manifest_path).with_seed(cfg.seed);
      const auto result = train<float>(data, cfg);
      save_checkpoint(result.model, out / "sae.ckpt");
      std::ofstream log(out / "train_log.csv", std::ios::trunc);
      log << "step,epoch,lr,loss,main_loss,aux_loss,dead_latents\n";
      for (const auto& e : result.log) {
        log << e.step << ',' << e.epoch << ',' << fmt_double(e.lr) << ',' << fmt_double(e.loss) << ','
            << fmt_double(e.main_loss) << ',' << fmt_double(e.aux_loss) << ',' << e.dead_latents << '\n';
      }
      run.config = to_json(cfg);
      run.config["k_aux_effective"] = cfg.effective_k_aux(cfg.latent_count(data.d()));
      run.config["n"] = cfg.latent_count(data.d());
      if (!result.log.empty()) {
        std::cout << "steps " << result.log.size() << ", loss " << result.log.front().loss << " -> "
                  << result.log.back().loss << '\n';
      } else {
        std::cout << "no training steps run\n";
      }
    } else if (*score_cmd) {
      run.command = "score";
      run.add_dataset(manifest_path);
      run.inputs.push_back(checkpoint_path);
      const auto data = open_dataset(manifest_path);
      const auto model = load_checkpoint(checkpoint_path);
      require_model_width(model, data.d());
      const auto artifacts = compute_scoring_artifacts(model, data, delta);
      std::vector<std::uint16_t> concepts;
      if (concept_arg.empty()) {
        for (const auto& [id, name] : data.manifest().concepts) concepts.push_back(id);
      } else {
        concepts.push_back(data.manifest().concept_id(concept_arg));
      }
      std::vector<MeanTable> means;
      std::vector<ScoreTable> scores;
      for (auto c : concepts) {
        means.push_back(means_from_statistics(artifacts.stats, c));
        scores.push_back(compute_scores(means.back(), delta));
      }
      write_scores_csv(scores, out / "scores.csv");
      write_means_csv(means, out / "means.csv");
      write_json(out / "score_summary.json", score_summary_json(scores));
      write_json(out / "density.json", density_json(artifacts.density));
      run.config = {{"delta", delta}, {"concepts", concepts}};
    } else if (*select_cmd) {
      run.command = "select";
      run.add_dataset(manifest_path);
      run.inputs.push_back(checkpoint_path);
      const auto data = open_dataset(manifest_path);
      const auto model = load_checkpoint(checkpoint_path);
      require_model_width(model, data.d());
      const auto c = data.manifest().concept_id(concept_arg);
      const auto ts = parse_timesteps(timesteps_arg, data.manifest().T);
      const auto artifacts = compute_scoring_artifacts(model, data, delta);
      const auto scores = compute_scores(means_from_statistics(artifacts.stats, c), delta);
      json per_t = json::array();
      for (auto t : ts) {
        if (!scores.has(t)) throw DataError("concept has no records at timestep " + std::to_string(t));
        const auto sel = select_features(scores, artifacts.density, t, tau);
        if (sel.truncated) std::cerr << "warning: fewer than tau candidates at timestep " << t << '\n';
        auto entry = selection_json(sel);
        entry["t"] = t;
        per_t.push_back(entry);
      }
      write_json(out / "selection.json", {{"concept", c}, {"tau", tau}, {"per_timestep", per_t}});
      run.config = {{"concept", c}, {"tau", tau}, {"timesteps", ts}, {"delta", delta}};
    } else if (*unlearn_cmd) {
      run.command = "unlearn";
      run.add_dataset(manifest_path);
      run.inputs.push_back(checkpoint_path);
      if (!config_path.empty()) {
        run.inputs.push_back(config_path);
        const auto j = read_json(config_path);
        if (!o_tau->count() && j.contains("tau")) tau = j["tau"].get<std::size_t>();
        if (!o_gamma->count() && j.contains("gamma")) gamma = j["gamma"].get<double>();
      }
      const auto data = open_dataset(manifest_path);
      const auto model = load_checkpoint(checkpoint_path);
      require_model_width(model, data.d());
      const auto c = data.manifest().concept_id(concept_arg);
      UnlearnPlan plan;
      if (!plan_path.empty()) {
        run.inputs.push_back(plan_path);
        plan = unlearn_plan_from_json(read_json(plan_path));
      } else {
        require_concept_present(data, c);
        const auto artifacts = compute_scoring_artifacts(model, data, delta);
        const auto ts = parse_timesteps(timesteps_arg, data.manifest().T);
        plan = prepare_from_artifacts(artifacts, c, ts, tau, gamma);
      }
      write_json(out / "plan.json", to_json(plan));
      const fs::path maps = maps_path.empty() ? fs::path(manifest_path) : fs::path(maps_path);
      if (!maps_path.empty()) run.add_dataset(maps);
      transform_maps(maps, out / "ablated", [&](const FeatureMap& m) {
        require_model_width(model, m.d);
        return ablate(m, model, plan);
      });
      run.config = {{"concept", c}, {"tau", tau}, {"gamma", plan.gamma}, {"timesteps", timesteps_arg}, {"delta", delta}};
      for (const auto& [t, fs_] : plan.per_timestep) std::cout << "t=" << t << ": " << fs_.size() << " feature(s)\n";
    } else if (*steer_cmd) {
      run.command = "steer";
      run.add_dataset(manifest_path);
      run.inputs.push_back(checkpoint_path);
      const auto data = open_dataset(manifest_path);
      const auto model = load_checkpoint(checkpoint_path);
      require_model_width(model, data.d());
      const auto c = data.manifest().concept_id(concept_arg);
      require_concept_present(data, c);
      const auto artifacts = compute_scoring_artifacts(model, data, delta);
      const auto ts = parse_timesteps(timesteps_arg, data.manifest().T);
      const auto plan = prepare_steer_from_artifacts(artifacts, c, ts, tau, gamma_plus);
      write_json(out / "steer_plan.json", to_json(plan));
      const fs::path maps = maps_path.empty() ? fs::path(manifest_path) : fs::path(maps_path);
      if (!maps_path.empty()) run.add_dataset(maps);
      transform_maps(maps, out / "steered", [&](const FeatureMap& m) { return steer(m, model, plan); });
      run.config = {{"concept", c}, {"tau", tau}, {"gamma_plus", gamma_plus}, {"timesteps", timesteps_arg}};
    } else if (*probe_cmd) {
      run.command = "probe-knn";
      run.add_dataset(manifest_path);
      run.inputs.push_back(checkpoint_path);
      std::vector<std::string> warnings;
      const auto data = open_dataset(manifest_path);
      const auto model = load_checkpoint(checkpoint_path);
      require_model_width(model, data.d());
      // Feature selection uses the scoring data (conditioned rows); the
      // classifier itself reads the probe view.
      const auto artifacts = compute_scoring_artifacts(model, data, delta);
      const auto view = probe_view(data, &warnings);
      for (const auto& w : warnings) std::cerr << "warning: " << w << '\n';
      const auto vectors = pooled_image_vectors(model, view);
      const auto [train_set, test_set] = split_train_test(vectors, test_fraction, probe_seed);
      std::vector<std::uint16_t> concepts;
      for (const auto& [id, name] : data.manifest().concepts) concepts.push_back(id);

      std::map<std::string, ProbeReport> reports;
      json per_t = json::object();
      for (std::uint32_t t = 0; t < data.manifest().T; ++t) {
        const auto ts = static_cast<std::uint16_t>(t);
        std::vector<LabeledVector> tr, te;
        for (const auto& v : train_set) if (v.timestep == ts) tr.push_back(v);
        for (const auto& v : test_set) if (v.timestep == ts) te.push_back(v);
        if (te.empty()) continue;
        const auto selected = score_selected_subset(artifacts, concepts, ts, per_class);
        const auto random = random_feature_subset(model.n, selected.size(), derive_seed(probe_seed, 7000 + t));
        const auto r_sel = knn_probe(tr, te, k_neighbors, selected);
        const auto r_rand = knn_probe(tr, te, k_neighbors, random);
        auto merge = [&](const std::string& name, const ProbeReport& r) {
          auto& dst = reports[name];
          dst.baseline = r.baseline;
          dst.k_neighbors = r.k_neighbors;
          dst.num_classes = r.num_classes;
          dst.accuracy[ts] = r.accuracy.at(ts);
          dst.test_counts[ts] = r.test_counts.at(ts);
        };
        merge("score_selected", r_sel);
        merge("random", r_rand);
        per_t[std::to_string(t)] = {{"score_selected_subset", selected}, {"random_subset", random}};
      }
      json report = {{"subsets", per_t}, {"warnings", warnings}};
      for (const auto& [name, r] : reports) report[name] = to_json(r);
      write_json(out / "probe.json", report);
      write_probe_csv(reports, out / "probe.csv");
      run.config = {{"per_class", per_class},
                    {"k_neighbors", k_neighbors},
                    {"test_fraction", test_fraction},
                    {"seed", probe_seed},
                    {"delta", delta}};
      for (const auto& [name, r] : reports) {
        std::cout << name << ":";
        for (const auto& [t, a] : r.accuracy) std::cout << " t" << t << "=" << a;
        std::cout << " (baseline " << r.baseline << ")\n";
      }
    } else if (*stats_cmd) {
      run.command = "stats";
      run.add_dataset(manifest_path);
      run.inputs.push_back(checkpoint_path);
      const auto data = open_dataset(manifest_path);
      const auto model = load_checkpoint(checkpoint_path);
      require_model_width(model, data.d());
      const auto stats = active_latent_stats(model, data, stats_mode_from_string(mode_arg), stats_batch);
      write_json(out / "stats.json", to_json(stats));
      std::ofstream csv(out / "per_image.csv", std::ios::trunc);
      csv << "image,active_latents\n";
      for (std::size_t i = 0; i < stats.per_image.size(); ++i) csv << i << ',' << fmt_double(stats.per_image[i]) << '\n';
      run.config = {{"mode", mode_arg}, {"batch_size", stats_batch}};
      const auto s = stats.summary(StatsGroup::per_image);
      std::cout << "per-image active latents: mean " << s.mean << ", min " << s.min << ", max " << s.max << '\n';
    } else if (*heat_cmd) {
      run.command = "heatmap";
      run.add_dataset(manifest_path);
      run.inputs.push_back(checkpoint_path);
      auto data = open_dataset(manifest_path).filtered(only_timestep(timestep));
      const auto model = load_checkpoint(checkpoint_path);
      require_model_width(model, data.d());
      if (!concept_arg.empty()) data = data.filtered(only_concept(data.manifest().concept_id(concept_arg)));
      const auto groups = group_images(data);
      std::vector<const ImageGroup*> matching;
      for (const auto& g : groups) matching.push_back(&g);
      if (image >= matching.size()) throw DataError("image index out of range for the selected timestep/concept");
      const auto& g = *matching[image];
      std::vector<ActivationRecord> rows;
      for (const auto& ref : g.rows) rows.push_back(data.load(ref));
      const auto map = FeatureMap::from_records(rows, data.manifest().h, data.manifest().w);
      const auto hm = heatmap(map, model, feature);
      write_heatmap_csv(hm, out / "heatmap.csv");
      write_heatmap_pgm(hm, out / "heatmap.pgm");
      run.config = {{"feature", feature}, {"timestep", timestep}, {"concept", concept_arg}, {"image", image}};
    }

    run.finish(out);
    return 0;
  } catch (const CLI::Error& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
