// smitin: command-line front end for the experiment harness.
//
//   smitin <command> [--config PATH] [flags]
//
// Commands: gen-corpus, train, probe, generate, eval, ablate, trace-plot.
// Flags override keys of the config file; `--set key=value` reaches any key.
// Errors print one line `error code=<code> message="<text>"` to stderr and
// exit with status 1 (2 for usage errors).

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include "smitin/harness.hpp"

namespace {

std::string escape(std::string s) {
  std::string out;
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c == '\n' ? ' ' : c;
  }
  return out;
}

int fail(const std::string& code, const std::string& msg, int status = 1) {
  std::cerr << "error code=" << code << " message=\"" << escape(msg) << "\"\n";
  return status;
}

}  // namespace

int main(int argc, char** argv) {
  using namespace smitin;

  CLI::App app{"Self-monitored inference-time intervention on a toy sequence model"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  // (config key, value) pairs in the order flags are applied
  std::vector<std::pair<std::string, std::string>> overrides;
  std::vector<std::string> sets;
  std::string trace_in;

  struct Flag {
    const char* name;
    const char* key;
    const char* help;
  };
  const Flag flags[] = {
      {"--mode", "mode", "none|original_iti|weight_decay|smitin"},
      {"--alpha", "alpha", "intervention strength"},
      {"--sparse-s", "sparse_s", "steps between sparse interventions"},
      {"--power-c", "power_c", "soft-weighting exponent"},
      {"--top-k", "top_k", "monitored heads K (and K' for top-K weighting)"},
      {"--weighting", "weighting", "topk|soft"},
      {"--direction", "direction", "logistic|massmean"},
      {"--traits", "traits", "comma-separated trait names"},
      {"--seed", "seed", "generation seed"},
      {"--out", "out", "output directory"},
      {"--threads", "threads", "worker threads"},
      {"--n-generations", "n_generations", "generations per plan"},
      {"--axis", "axis", "ablation axis: num_data|top_k|alpha|sparse_s"},
      {"--modes", "modes", "comma-separated modes evaluated by eval"},
  };
  std::vector<std::string> values(std::size(flags));
  app.add_option("--config", config_path, "flat key = value config file");
  for (std::size_t i = 0; i < std::size(flags); ++i) app.add_option(flags[i].name, values[i], flags[i].help);
  bool remove = false;
  app.add_flag("--remove", remove, "negate alpha and count success as falling below tau");
  app.add_option("--set", sets, "extra key=value override (repeatable)");

  auto* gen_corpus = app.add_subcommand("gen-corpus", "write LM and probing corpora");
  auto* train = app.add_subcommand("train", "train the model, write checkpoint and loss curve");
  auto* probe = app.add_subcommand("probe", "train probe banks and accuracy maps");
  auto* generate_cmd = app.add_subcommand("generate", "generate traced continuations under one plan");
  auto* eval = app.add_subcommand("eval", "evaluate the mode matrix and write report.csv");
  auto* ablate = app.add_subcommand("ablate", "vary one setting and write ablate_<axis>.csv");
  auto* plot = app.add_subcommand("trace-plot", "per-step monitor CSV for one trace");
  plot->add_option("--trace", trace_in, "trace CSV to convert (default: generate one)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), 2);
  }

  try {
    ExperimentConfig cfg = config_path.empty() ? ExperimentConfig{} : load_config(config_path);
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw Error("usage", "--set expects key=value, got '" + s + "'");
      cfg.set(s.substr(0, eq), s.substr(eq + 1));
    }
    for (std::size_t i = 0; i < std::size(flags); ++i)
      if (!values[i].empty()) cfg.set(flags[i].key, values[i]);
    if (remove) cfg.remove = true;
    cfg.validate();
    const std::string hash = cfg.hash();

    if (gen_corpus->parsed()) {
      for (const auto& p : cmd_gen_corpus(cfg).paths) std::cout << p << '\n';
    } else if (train->parsed()) {
      const auto o = cmd_train(cfg);
      std::cout << o.loss_csv;
      std::printf("# heldout_loss=%.6f\n# checkpoint=%s\n", o.heldout_loss, cfg.checkpoint_path().c_str());
    } else if (probe->parsed()) {
      const auto o = cmd_probe(cfg);
      for (std::size_t i = 0; i < o.traits.size(); ++i)
        std::printf("%s %s\n", o.traits[i].c_str(), o.maps[i].summary().c_str());
    } else if (generate_cmd->parsed()) {
      const auto traces = cmd_generate(cfg);
      std::printf("%zu traces in %s\n", traces.size(), cfg.trace_path().c_str());
    } else if (eval->parsed()) {
      const auto o = cmd_eval(cfg);
      std::cout << o.report.table();
      if (!o.report.footer.empty()) std::cout << "# " << o.report.footer << '\n';
    } else if (ablate->parsed()) {
      std::cout << cmd_ablate(cfg).csv;
    } else if (plot->parsed()) {
      GenerationTrace tr;
      if (!trace_in.empty()) {
        if (!fs::exists(trace_in)) throw Error("missing_file", "trace not found: " + trace_in);
        tr = parse_trace_csv(io::read_file(trace_in));
      } else {
        ExperimentConfig one = cfg;
        one.n_generations = 1;
        one.trace_dir = (fs::path(cfg.out) / "trace_plot").string();
        tr = cmd_generate(one).at(0);
      }
      const std::string csv = trace_plot_csv(tr, hash);
      write_text(fs::path(cfg.out) / "trace_plot.csv", csv);
      std::cout << csv;
    }
  } catch (const Error& e) {
    return fail(e.code(), e.what());
  } catch (const std::exception& e) {
    return fail("internal", e.what());
  }
  return 0;
}
