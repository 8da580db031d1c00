// Single-binary entry point: gen-data, train, tokenize, metrics.
// Exit codes: 0 ok, 2 usage error, 3 numeric failure, 4 artifact mismatch.
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mixquant/errors.hpp"
#include "mixquant/kernels.hpp"
#include "mixquant/manifest.hpp"
#include "mixquant/metrics.hpp"
#include "mixquant/train.hpp"

namespace fs = std::filesystem;
using namespace mixquant;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitArtifact = 4;

struct GenDataArgs {
  std::size_t items = 0;
  std::size_t clusters = 1;
  double zipf = 1.1;
  std::string dims = "64,48,32";
  std::uint64_t seed = 7;
  std::string out;
  std::string format = "jsonl";
};

struct TrainArgs {
  std::string config;
  std::string data;
  std::string out;
  std::int64_t epochs_override = -1;
};

struct TokenizeArgs {
  std::string checkpoint;
  std::string data;
  std::string out;
  double threshold = 0.0;
};

struct MetricsArgs {
  std::string checkpoint;
  std::string data;
  std::string out;  // optional directory; stdout when empty
};

Dims parse_dims(const std::string& text) {
  std::vector<std::size_t> parts;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t comma = text.find(',', start);
    std::string tok = text.substr(
        start, comma == std::string::npos ? std::string::npos : comma - start);
    try {
      std::size_t used = 0;
      unsigned long long v = std::stoull(tok, &used);
      if (used != tok.size() || v == 0) throw std::invalid_argument(tok);
      parts.push_back(v);
    } catch (const std::exception&) {
      throw PreconditionError("--dims expects three positive integers like 64,48,32");
    }
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  if (parts.size() != 3) {
    throw PreconditionError("--dims expects three positive integers like 64,48,32");
  }
  return {parts[0], parts[1], parts[2]};
}

void require_input(const std::string& path, const char* flag) {
  if (!fs::exists(path)) {
    throw PreconditionError(std::string(flag) + ": no such file: " + path);
  }
}

fs::path prepare_out_dir(const std::string& out) {
  fs::path dir(out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) {
    throw PreconditionError("--out: cannot create directory: " + out);
  }
  return dir;
}

DataFormat parse_format(const std::string& f) {
  return f == "packed" ? DataFormat::packed : DataFormat::jsonl;
}

Dataset load_input_dataset(const std::string& path) {
  DataFormat fmt = path.size() >= 7 && path.substr(path.size() - 7) == ".packed"
                       ? DataFormat::packed
                       : DataFormat::jsonl;
  return load_dataset(path, fmt);
}

MixQuantModel load_checkpoint_for(const Dataset& data, const std::string& path) {
  MixQuantModel m = load_model(path);
  if (!(m.input_dims == data.dims)) {
    throw ArtifactError("checkpoint expects dims (" +
                        std::to_string(m.input_dims.d_t) + "," +
                        std::to_string(m.input_dims.d_v) + "," +
                        std::to_string(m.input_dims.d_b) + ") but data has (" +
                        std::to_string(data.dims.d_t) + "," +
                        std::to_string(data.dims.d_v) + "," +
                        std::to_string(data.dims.d_b) + ")");
  }
  return m;
}

int cmd_gen_data(const GenDataArgs& a) {
  Dims dims = parse_dims(a.dims);
  Dataset ds = generate_synthetic(a.items, dims, a.clusters, a.zipf, a.seed);
  fs::path dir = prepare_out_dir(a.out);
  std::string file = a.format == "packed" ? "dataset.packed" : "dataset.jsonl";
  fs::path data_path = dir / file;
  save_dataset(ds, data_path.string(), parse_format(a.format));

  RunManifest man;
  man.command = "gen-data";
  man.seed = a.seed;
  nlohmann::json cfg;
  cfg["items"] = a.items;
  cfg["clusters"] = a.clusters;
  cfg["zipf"] = a.zipf;
  cfg["dims"] = a.dims;
  cfg["seed"] = a.seed;
  cfg["format"] = a.format;
  man.config_json = cfg.dump();
  man.artifacts.push_back({file, fingerprint_string(fingerprint_file(data_path.string()))});
  write_manifest(man, dir.string());
  std::fprintf(stderr, "wrote %s (%zu items)\n", data_path.string().c_str(),
               ds.items.size());
  return kExitOk;
}

int cmd_train(const TrainArgs& a) {
  require_input(a.config, "--config");
  require_input(a.data, "--data");
  TrainConfig cfg = load_train_config(a.config);
  if (a.epochs_override >= 0) {
    cfg.epochs = static_cast<std::size_t>(a.epochs_override);
  }
  Dataset ds = load_input_dataset(a.data);
  fs::path dir = prepare_out_dir(a.out);
  fs::path ckpt = dir / "checkpoint.ckpt";
  fs::path hist = dir / "history.csv";

  auto [model, history] = train(ds, cfg, ckpt.string());
  save_history(history, hist.string());
  for (std::size_t e = 0; e < history.size(); ++e) {
    std::fprintf(stderr, "epoch %zu/%zu total=%.6f recon=%.6f\n", e + 1,
                 history.size(), history[e].total, history[e].l_recon);
  }

  RunManifest man;
  man.command = "train";
  man.seed = cfg.seed;
  man.config_json = train_config_to_json(cfg);
  man.inputs.push_back({fs::path(a.config).filename().string(),
                        fingerprint_string(fingerprint_file(a.config))});
  man.inputs.push_back({fs::path(a.data).filename().string(),
                        fingerprint_string(fingerprint_file(a.data))});
  man.artifacts.push_back(
      {"checkpoint.ckpt", fingerprint_string(fingerprint_file(ckpt.string()))});
  man.artifacts.push_back(
      {"history.csv", fingerprint_string(fingerprint_file(hist.string()))});
  write_manifest(man, dir.string());
  std::fprintf(stderr, "wrote %s and %s\n", ckpt.string().c_str(),
               hist.string().c_str());
  return kExitOk;
}

int cmd_tokenize(const TokenizeArgs& a) {
  require_input(a.checkpoint, "--checkpoint");
  require_input(a.data, "--data");
  Dataset ds = load_input_dataset(a.data);
  MixQuantModel m = load_checkpoint_for(ds, a.checkpoint);
  TokenizedCorpus corpus = tokenize_corpus_parallel(ds, m, a.threshold);

  fs::path dir = prepare_out_dir(a.out);
  fs::path sids = dir / "sids.jsonl";
  save_sids(corpus.sids, sids.string());

  RunManifest man;
  man.command = "tokenize";
  nlohmann::json cfg;
  cfg["checkpoint"] = fs::path(a.checkpoint).filename().string();
  cfg["data"] = fs::path(a.data).filename().string();
  cfg["threshold"] = a.threshold;
  man.config_json = cfg.dump();
  man.inputs.push_back({fs::path(a.checkpoint).filename().string(),
                        fingerprint_string(fingerprint_file(a.checkpoint))});
  man.inputs.push_back({fs::path(a.data).filename().string(),
                        fingerprint_string(fingerprint_file(a.data))});
  man.artifacts.push_back(
      {"sids.jsonl", fingerprint_string(fingerprint_file(sids.string()))});
  write_manifest(man, dir.string());
  std::fprintf(stderr, "wrote %s (%zu items)\n", sids.string().c_str(),
               corpus.sids.size());
  return kExitOk;
}

int cmd_metrics(const MetricsArgs& a) {
  require_input(a.checkpoint, "--checkpoint");
  require_input(a.data, "--data");
  Dataset ds = load_input_dataset(a.data);
  MixQuantModel m = load_checkpoint_for(ds, a.checkpoint);
  QuantReport report = evaluate(ds, m);

  if (a.out.empty()) {
    std::fputs(quant_report_to_json(report).c_str(), stdout);
    return kExitOk;
  }
  fs::path dir = prepare_out_dir(a.out);
  fs::path file = dir / "metrics.json";
  save_quant_report(report, file.string());

  RunManifest man;
  man.command = "metrics";
  nlohmann::json cfg;
  cfg["checkpoint"] = fs::path(a.checkpoint).filename().string();
  cfg["data"] = fs::path(a.data).filename().string();
  man.config_json = cfg.dump();
  man.inputs.push_back({fs::path(a.checkpoint).filename().string(),
                        fingerprint_string(fingerprint_file(a.checkpoint))});
  man.inputs.push_back({fs::path(a.data).filename().string(),
                        fingerprint_string(fingerprint_file(a.data))});
  man.artifacts.push_back(
      {"metrics.json", fingerprint_string(fingerprint_file(file.string()))});
  write_manifest(man, dir.string());
  std::fprintf(stderr, "wrote %s\n", file.string().c_str());
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"behavior-content mixture quantizer"};
  app.require_subcommand(1);

  GenDataArgs gen;
  CLI::App* c_gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  c_gen->add_option("--items", gen.items, "item count")
      ->required()
      ->check(CLI::PositiveNumber);
  c_gen->add_option("--clusters", gen.clusters, "cluster count")
      ->check(CLI::PositiveNumber);
  c_gen->add_option("--zipf", gen.zipf, "popularity skew exponent")
      ->check(CLI::PositiveNumber);
  c_gen->add_option("--dims", gen.dims, "text,vision,behavior dims");
  c_gen->add_option("--seed", gen.seed, "rng seed");
  c_gen->add_option("--out", gen.out, "output directory")->required();
  c_gen->add_option("--format", gen.format, "dataset format")
      ->check(CLI::IsMember({"jsonl", "packed"}));

  TrainArgs tr;
  CLI::App* c_train = app.add_subcommand("train", "train a tokenizer");
  c_train->add_option("--config", tr.config, "train config json")->required();
  c_train->add_option("--data", tr.data, "dataset path")->required();
  c_train->add_option("--out", tr.out, "output directory")->required();
  c_train->add_option("--epochs", tr.epochs_override, "override config epochs")
      ->check(CLI::NonNegativeNumber);

  TokenizeArgs tok;
  CLI::App* c_tok = app.add_subcommand("tokenize", "emit semantic ids");
  c_tok->add_option("--checkpoint", tok.checkpoint, "model checkpoint")->required();
  c_tok->add_option("--data", tok.data, "dataset path")->required();
  c_tok->add_option("--out", tok.out, "output directory")->required();
  c_tok->add_option("--threshold", tok.threshold, "behavior pad threshold");

  MetricsArgs met;
  CLI::App* c_met = app.add_subcommand("metrics", "quantization metrics");
  c_met->add_option("--checkpoint", met.checkpoint, "model checkpoint")->required();
  c_met->add_option("--data", met.data, "dataset path")->required();
  c_met->add_option("--out", met.out, "optional output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return kExitUsage;
  }

  try {
    if (c_gen->parsed()) return cmd_gen_data(gen);
    if (c_train->parsed()) return cmd_train(tr);
    if (c_tok->parsed()) return cmd_tokenize(tok);
    return cmd_metrics(met);
  } catch (const PreconditionError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitArtifact;
  }
}
