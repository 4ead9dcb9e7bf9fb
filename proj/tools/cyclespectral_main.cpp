// cyclespectral: generate synthetic cross-spectral pairs, train the dual
// flow estimator, run inference, and score results.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cspec/evaluation.hpp"
#include "cspec/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json load_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw cspec::ConfigError("cannot read config file: " + path);
  json j = json::parse(f, nullptr, false);
  if (j.is_discarded()) throw cspec::ConfigError("invalid json in " + path);
  return j;
}

json resolve_config(const std::string& config_path,
                    const std::vector<std::string>& overrides) {
  json j = config_path.empty() ? json::object() : load_json_file(config_path);
  for (const auto& o : overrides) cspec::apply_json_override(j, o);
  return j;
}

void write_snapshot(const std::string& out_dir, const json& j) {
  fs::create_directories(out_dir);
  std::ofstream f(fs::path(out_dir) / "config_resolved.json", std::ios::trunc);
  if (!f) throw cspec::IoError("cannot write config snapshot in " + out_dir);
  f << j.dump(2) << '\n';
}

cspec::SigmaConfig model_config_from(const json& cfg, const cspec::Imagef& a,
                                     const cspec::Imagef& b) {
  cspec::SigmaConfig mc;
  mc.spectra = {{a.spectrum, a.channels()}, {b.spectrum, b.channels()}};
  if (cfg.contains("model")) {
    const json& m = cfg.at("model");
    if (m.contains("enc_widths")) {
      auto w = m.at("enc_widths").get<std::vector<int>>();
      for (size_t i = 0; i < mc.enc_widths.size() && i < w.size(); ++i)
        mc.enc_widths[i] = w[i];
    }
    if (m.contains("est_widths"))
      mc.est_widths = m.at("est_widths").get<std::vector<int>>();
    mc.radius = m.value("radius", mc.radius);
    mc.seed = m.value("seed", mc.seed);
  }
  return mc;
}

std::string spectra_str(const std::vector<std::pair<std::string, int>>& s) {
  std::string out;
  for (const auto& [tag, c] : s) out += (out.empty() ? "" : ",") + tag;
  return "{" + out + "}";
}

// --------------------------------------------------------------------------

int run_generate(const std::string& out_dir, int count, int height, int width,
                 uint64_t seed, const std::string& flow_kind, double max_mag,
                 double tx, double ty, const std::string& transform_kind,
                 const std::string& spectrum_b) {
  fs::create_directories(out_dir);
  cspec::FlowSpec fspec;
  fspec.kind = cspec::FlowSpec::kind_from_string(flow_kind);
  fspec.max_mag = max_mag;
  fspec.tx = tx;
  fspec.ty = ty;
  cspec::SpectralTransform tr;
  tr.kind = cspec::SpectralTransform::kind_from_string(transform_kind);
  tr.spectrum_out = spectrum_b;
  tr.seed = cspec::mix64(seed, cspec::hash_str("transform"));

  std::vector<cspec::ManifestEntry> entries;
  for (int i = 0; i < count; ++i) {
    uint64_t s = cspec::mix64(seed, uint64_t(i) + 1);
    cspec::Imagef base = cspec::generate_base_image(height, width, s);
    cspec::PairSample p = cspec::generate_pair(base, fspec, tr, s);
    std::string id = "pair" + std::to_string(i);
    cspec::save_image((fs::path(out_dir) / (id + "_a.png")).string(), p.img_a);
    cspec::save_image((fs::path(out_dir) / (id + "_b.png")).string(), p.img_b);
    cspec::write_flo((fs::path(out_dir) / (id + "_gt.flo")).string(), *p.gt_flow);
    cspec::ManifestEntry e;
    e.pair_id = id;
    e.path_a = id + "_a.png";
    e.spectrum_a = p.img_a.spectrum;
    e.path_b = id + "_b.png";
    e.spectrum_b = p.img_b.spectrum;
    e.gt_flow_path = id + "_gt.flo";
    entries.push_back(std::move(e));
  }
  cspec::write_manifest((fs::path(out_dir) / "manifest.csv").string(), entries);
  std::cout << "wrote " << count << " pairs to " << out_dir << '\n';
  return 0;
}

int run_train(const std::string& manifest_path, const std::string& out_dir,
              const std::string& config_path, std::optional<uint64_t> seed,
              const std::vector<std::string>& overrides,
              const std::string& resume_checkpoint) {
  json cfg = resolve_config(config_path, overrides);
  cspec::TrainConfig tc = cspec::TrainConfig::from_json(
      cfg.contains("train") ? cfg.at("train") : json::object());
  if (seed) tc.seed = *seed;

  cspec::Manifest manifest = cspec::load_manifest(manifest_path);
  if (manifest.size() == 0)
    throw cspec::IngestionError("manifest has no entries: " + manifest_path);
  cspec::PairSample first = manifest.load(0);

  cspec::SigmaModel<float> model;
  if (!resume_checkpoint.empty()) {
    auto ck = cspec::load_checkpoint<float>(resume_checkpoint);
    model = cspec::model_from_checkpoint(ck);
    fs::create_directories(out_dir);
    fs::copy_file(resume_checkpoint, fs::path(out_dir) / "checkpoint.bin",
                  fs::copy_options::overwrite_existing);
  } else {
    model = cspec::SigmaModel<float>(model_config_from(cfg, first.img_a, first.img_b));
  }

  json snapshot;
  snapshot["train"] = tc.to_json();
  snapshot["model"] = model.config().to_json();
  snapshot["manifest"] = manifest_path;
  write_snapshot(out_dir, snapshot);

  cspec::ManifestSource source(std::move(manifest));
  auto res = cspec::train<float>(model, source, tc, out_dir,
                                 [](int64_t it, const cspec::LossBreakdown<float>& lb) {
                                   std::cout << "iter " << it << " total " << lb.total
                                             << '\n';
                                 });
  std::cout << "trained " << res.iterations_done << " iterations; checkpoint at "
            << res.checkpoint_path << '\n';
  return 0;
}

int run_infer(const std::string& checkpoint_path, const std::string& manifest_path,
              const std::string& out_dir, bool warped) {
  auto ck = cspec::load_checkpoint<float>(checkpoint_path);
  cspec::SigmaModel<float> model = cspec::model_from_checkpoint(ck);
  cspec::Manifest manifest = cspec::load_manifest(manifest_path);
  fs::create_directories(out_dir);

  auto known = [&](const std::string& tag) {
    for (const auto& [t, c] : model.config().spectra)
      if (t == tag) return true;
    return false;
  };
  for (size_t i = 0; i < manifest.size(); ++i) {
    cspec::PairSample s = manifest.load(i);
    if (!known(s.img_a.spectrum) || !known(s.img_b.spectrum))
      throw cspec::ConfigError(
          "pair '" + s.pair_id + "' uses spectra {" + s.img_a.spectrum + "," +
          s.img_b.spectrum + "} but the checkpoint was trained on " +
          spectra_str(model.config().spectra));
    cspec::Flowf f_ab = model.sigma_forward(s.img_a, s.img_b);
    cspec::Flowf f_ba = model.sigma_forward(s.img_b, s.img_a);
    cspec::write_flo((fs::path(out_dir) / (s.pair_id + "_ab.flo")).string(), f_ab);
    cspec::write_flo((fs::path(out_dir) / (s.pair_id + "_ba.flo")).string(), f_ba);
    if (warped) {
      cspec::save_image((fs::path(out_dir) / (s.pair_id + "_warped_ab.png")).string(),
                        cspec::bilinear_warp(s.img_a, f_ab));
      cspec::save_image((fs::path(out_dir) / (s.pair_id + "_warped_ba.png")).string(),
                        cspec::bilinear_warp(s.img_b, f_ba));
    }
  }
  std::cout << "inferred " << manifest.size() << " pairs into " << out_dir << '\n';
  return 0;
}

int run_eval(const std::string& manifest_path, const std::string& flows_dir,
             const std::string& out_dir) {
  cspec::Manifest manifest = cspec::load_manifest(manifest_path);
  std::vector<cspec::PairMetrics> metrics;
  std::vector<std::pair<std::string, cspec::Flowf>> flows;
  std::vector<std::optional<cspec::Flowf>> gts;
  bool any_annotation = false;
  for (size_t i = 0; i < manifest.size(); ++i) {
    cspec::PairSample s = manifest.load(i);
    any_annotation |= s.gt_flow.has_value() || (s.mask_a && s.mask_b) ||
                      !s.points.empty();
    std::string flo = (fs::path(flows_dir) / (s.pair_id + "_ab.flo")).string();
    cspec::Flowf f = cspec::read_flo(flo);
    metrics.push_back(cspec::evaluate_pair(s, f));
    flows.push_back({s.pair_id, std::move(f)});
    gts.push_back(s.gt_flow);
  }
  if (!any_annotation)
    throw cspec::IngestionError(
        "nothing to evaluate: no pair carries ground-truth flow, masks, or points");
  cspec::emit_report(out_dir, metrics, flows, gts);
  std::cout << "scored " << manifest.size() << " pairs; report in " << out_dir << '\n';
  return 0;
}

int run_report(const std::string& flows_dir, const std::string& out_dir) {
  fs::create_directories(out_dir);
  int n = 0;
  for (const auto& entry : fs::directory_iterator(flows_dir)) {
    if (entry.path().extension() != ".flo") continue;
    cspec::Flowf f = cspec::read_flo(entry.path().string());
    cspec::save_image(
        (fs::path(out_dir) / (entry.path().stem().string() + "_flow.png")).string(),
        cspec::flow_to_color(f));
    ++n;
  }
  if (n == 0) throw cspec::IngestionError("no .flo files in " + flows_dir);
  std::cout << "rendered " << n << " flow files into " << out_dir << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cross-spectral dense correspondence toolkit"};
  app.require_subcommand(1);

  // generate
  auto* gen = app.add_subcommand("generate", "synthesize a cross-spectral dataset");
  std::string g_out = "dataset";
  int g_count = 10, g_h = 128, g_w = 128;
  uint64_t g_seed = 1;
  std::string g_flow = "smooth", g_transform = "grayscale-invert-blur";
  std::string g_spectrum_b = "pseudo-fir";
  double g_max_mag = 6.0, g_tx = 0, g_ty = 0;
  gen->add_option("--out", g_out, "output directory");
  gen->add_option("--count", g_count, "number of pairs");
  gen->add_option("--height", g_h, "image height");
  gen->add_option("--width", g_w, "image width");
  gen->add_option("--seed", g_seed, "dataset seed");
  gen->add_option("--flow", g_flow, "flow kind: constant|homography|smooth");
  gen->add_option("--max-mag", g_max_mag, "max flow magnitude in pixels");
  gen->add_option("--tx", g_tx, "constant flow x displacement");
  gen->add_option("--ty", g_ty, "constant flow y displacement");
  gen->add_option("--transform", g_transform,
                  "spectral transform: identity|channel-mix|grayscale-invert-blur");
  gen->add_option("--spectrum-b", g_spectrum_b, "spectrum tag for the second image");

  // train
  auto* tr = app.add_subcommand("train", "train the dual flow estimator");
  std::string t_manifest, t_out = "run", t_config, t_resume;
  std::optional<uint64_t> t_seed;
  std::vector<std::string> t_set;
  tr->add_option("--manifest", t_manifest, "training manifest")->required();
  tr->add_option("--out", t_out, "output directory (log, checkpoints)");
  tr->add_option("--config", t_config, "json config file");
  tr->add_option("--seed", t_seed, "training seed (overrides config)");
  tr->add_option("--checkpoint", t_resume, "checkpoint to resume from");
  tr->add_option("--set", t_set, "config override, path.to.key=value")
      ->take_all();

  // infer
  auto* in = app.add_subcommand("infer", "predict flow fields for a manifest");
  std::string i_ckpt, i_manifest, i_out = "flows";
  bool i_warped = false;
  in->add_option("--checkpoint", i_ckpt, "trained checkpoint")->required();
  in->add_option("--manifest", i_manifest, "manifest to run on")->required();
  in->add_option("--out", i_out, "output directory for .flo files");
  in->add_flag("--warped", i_warped, "also write warped images");

  // eval
  auto* ev = app.add_subcommand("eval", "score predicted flows against annotations");
  std::string e_manifest, e_flows, e_out = "report";
  ev->add_option("--manifest", e_manifest, "manifest with annotations")->required();
  ev->add_option("--flows", e_flows, "directory of predicted .flo files")->required();
  ev->add_option("--out", e_out, "report output directory");

  // report
  auto* rp = app.add_subcommand("report", "render flow files to color images");
  std::string r_flows, r_out = "vis";
  rp->add_option("--flows", r_flows, "directory of .flo files")->required();
  rp->add_option("--out", r_out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed())
      return run_generate(g_out, g_count, g_h, g_w, g_seed, g_flow, g_max_mag, g_tx,
                          g_ty, g_transform, g_spectrum_b);
    if (tr->parsed()) return run_train(t_manifest, t_out, t_config, t_seed, t_set,
                                       t_resume);
    if (in->parsed()) return run_infer(i_ckpt, i_manifest, i_out, i_warped);
    if (ev->parsed()) return run_eval(e_manifest, e_flows, e_out);
    if (rp->parsed()) return run_report(r_flows, r_out);
  } catch (const cspec::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const cspec::IngestionError& e) {
    std::cerr << "ingestion error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 4;
  }
  return 2;
}
