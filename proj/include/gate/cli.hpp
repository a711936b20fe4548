#pragma once

// Command-line front end. Exit codes: 0 success, 1 usage error, 2 data or
// validation error.

#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "gate/error.hpp"
#include "gate/eval.hpp"
#include "gate/graph.hpp"
#include "gate/kb_ingest.hpp"
#include "gate/neural.hpp"
#include "gate/prompt.hpp"
#include "gate/rl_train.hpp"
#include "gate/selector.hpp"
#include "gate/service.hpp"
#include "gate/text_encode.hpp"

// After Eigen: <resolv.h> defines a _res macro.
#include <httplib.h>

namespace gate {

namespace cli_detail {

inline bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  return in;
}

inline void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out << text;
  if (!out) throw Error("failed writing " + path);
}

// Triple KBs are TSV; anything else is read as a document KB.
inline std::variant<DocumentKB, TripleKB> load_kb(const std::string& path, const std::string& kind) {
  auto in = open_in(path);
  bool triple = kind == "triple" || (kind == "auto" && ends_with(path, ".tsv"));
  if (triple) return parse_triple_kb(in);
  return parse_document_kb(in);
}

inline UnifiedGraph load_graph(const std::string& graph_path, const std::string& kb_path, const std::string& kind) {
  if (!graph_path.empty()) return graph_from_json(read_json_file(graph_path));
  if (kb_path.empty()) throw ConfigError("one of --graph or --kb is required");
  auto g = unify(load_kb(kb_path, kind));
  auto problems = validate(g);
  if (!problems.empty()) throw ValidationError("unified graph: " + problems.front());
  return g;
}

inline std::vector<DialogueSample> load_corpus(const std::string& path) {
  auto in = open_in(path);
  return parse_dialogue_corpus(in);
}

}  // namespace cli_detail

inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  namespace cd = cli_detail;
  CLI::App app{"Graph-based knowledge selection: synthesize, unify, train, evaluate and serve."};
  app.name("gate");
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "Config file of key = value pairs; flags override it")->envname("GATE_CONFIG");

  std::optional<std::uint64_t> seed;
  std::string precision = "f64";
  app.add_option("--seed", seed, "Random seed");
  app.add_option("--precision", precision, "Parameter precision for training")
      ->check(CLI::IsMember({"f32", "f64"}));

  std::string kb_path, kb_kind = "auto", graph_path, corpus_path, ckpt_path, out_path, embeddings;

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic knowledge base and dialogue corpus");
  SynthConfig sc;
  std::string synth_kind = "document";
  synth->add_option("--kb", kb_path, "Output KB path")->required();
  synth->add_option("--corpus", corpus_path, "Output dialogue JSONL path")->required();
  synth->add_option("--kind", synth_kind, "document or triple")->check(CLI::IsMember({"document", "triple"}));
  synth->add_option("--dialogues", sc.n_dialogues, "Number of dialogues");
  synth->add_option("--topics", sc.n_topics, "Topics (document mode)");
  synth->add_option("--titles", sc.n_titles_per_topic, "Titles per topic (document mode)");
  synth->add_option("--sentences", sc.n_sentences_per_title, "Sentences per title (document mode)");
  synth->add_option("--entities", sc.n_entities, "Entities (triple mode)");

  // unify
  auto* unify_cmd = app.add_subcommand("unify", "Map a knowledge base onto the unified graph");
  unify_cmd->add_option("--kb", kb_path, "KB path (.json documents or .tsv triples)")->required();
  unify_cmd->add_option("--kind", kb_kind, "auto, document or triple")
      ->check(CLI::IsMember({"auto", "document", "triple"}));
  unify_cmd->add_option("--out", out_path, "Graph JSON output (stdout if omitted)");

  // shared model/data flags
  auto data_flags = [&](CLI::App* c) {
    c->add_option("--graph", graph_path, "Unified graph JSON");
    c->add_option("--kb", kb_path, "Knowledge base, unified on load");
    c->add_option("--kind", kb_kind, "KB kind: auto, document or triple")
        ->check(CLI::IsMember({"auto", "document", "triple"}));
    c->add_option("--embeddings", embeddings, "Precomputed embedding JSONL (default: hashed bag-of-words)");
  };
  SelectorConfig sel_cfg;
  std::size_t fixed_pool = 0;
  bool no_node_attention = false;
  auto selector_flags = [&](CLI::App* c) {
    c->add_option("--fixed-pool", fixed_pool, "Use a fixed-size pool of this many items");
    c->add_option("--t-max", sel_cfg.t_max, "Maximum traversal steps");
    c->add_option("--m-min", sel_cfg.m_min, "Minimum adaptive pool fraction");
    c->add_flag("--no-node-attention", no_node_attention, "Score knowledge without node attention");
  };

  // train
  auto* train_cmd = app.add_subcommand("train", "Train selector parameters");
  TrainConfig tc;
  std::string heldout_path, log_path;
  bool no_walk = false, no_node = false, no_knowledge = false;
  data_flags(train_cmd);
  selector_flags(train_cmd);
  train_cmd->add_option("--corpus", corpus_path, "Training dialogues JSONL")->required();
  train_cmd->add_option("--heldout", heldout_path, "Held-out dialogues JSONL, R@1 logged per epoch");
  train_cmd->add_option("--out", ckpt_path, "Checkpoint output path")->required();
  train_cmd->add_option("--log", log_path, "Per-epoch JSONL log path");
  train_cmd->add_option("--epochs", tc.epochs, "Epochs");
  train_cmd->add_option("--batch-size", tc.batch_size, "Samples per optimizer step");
  train_cmd->add_option("--rollouts", tc.rollouts, "Sampled traversals per sample");
  train_cmd->add_option("--max-lr", tc.max_lr, "Peak learning rate");
  train_cmd->add_option("--weight-decay", tc.weight_decay, "AdamW weight decay");
  train_cmd->add_option("--temperature", tc.knowledge_temperature, "Knowledge-loss softmax temperature");
  train_cmd->add_option("--d-in", tc.dims.d_in, "Embedding width (hashed provider)");
  train_cmd->add_option("--d-hidden", tc.dims.d_hidden, "GAT width");
  train_cmd->add_option("--heads", tc.dims.heads, "Attention heads");
  train_cmd->add_flag("--no-walk-loss", no_walk, "Disable the REINFORCE walk loss");
  train_cmd->add_flag("--no-node-loss", no_node, "Disable the supervised node loss");
  train_cmd->add_flag("--no-knowledge-loss", no_knowledge, "Disable the supervised knowledge loss");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Recall@k of the selector and baselines");
  std::vector<std::uint64_t> seeds;
  std::vector<std::size_t> ks{1, 5, 10};
  std::string ranks_path;
  data_flags(eval_cmd);
  selector_flags(eval_cmd);
  eval_cmd->add_option("--corpus", corpus_path, "Evaluation dialogues JSONL")->required();
  eval_cmd->add_option("--ckpt", ckpt_path, "Checkpoint")->required();
  eval_cmd->add_option("--seeds", seeds, "Seeds for the random baseline");
  eval_cmd->add_option("--k", ks, "Recall cut-offs");
  eval_cmd->add_option("--out", out_path, "Report JSON path (stdout if omitted)");
  eval_cmd->add_option("--ranks", ranks_path, "Per-sample gold-rank CSV path");

  // select
  auto* select_cmd = app.add_subcommand("select", "Select a knowledge pool for one turn");
  std::string utterance, start_node;
  std::vector<std::string> history, pool;
  data_flags(select_cmd);
  selector_flags(select_cmd);
  select_cmd->add_option("--ckpt", ckpt_path, "Checkpoint")->required();
  select_cmd->add_option("--utterance", utterance, "Current user utterance")->required();
  select_cmd->add_option("--history", history, "Earlier turns, oldest first");
  select_cmd->add_option("--start-node", start_node, "Process node to start the traversal from");

  // serve
  auto* serve_cmd = app.add_subcommand("serve", "Serve selections over HTTP");
  std::string host = "127.0.0.1";
  int port = 8080;
  ServiceOptions service_opt;
  serve_cmd->add_option("--graph", graph_path, "Unified graph JSON")->required();
  serve_cmd->add_option("--ckpt", ckpt_path, "Checkpoint")->required();
  serve_cmd->add_option("--embeddings", embeddings, "Precomputed embedding JSONL");
  serve_cmd->add_option("--host", host, "Bind address");
  serve_cmd->add_option("--port", port, "Port");
  serve_cmd->add_option("--max-inflight", service_opt.max_inflight, "Concurrent requests before 503");
  selector_flags(serve_cmd);

  // render-prompt
  auto* render_cmd = app.add_subcommand("render-prompt", "Render a generator prompt");
  std::string mode = "with_knowledge", input_path;
  render_cmd->add_option("--history", history, "Dialogue turns, oldest first");
  render_cmd->add_option("--pool", pool, "Knowledge texts");
  render_cmd->add_option("--mode", mode, "with_knowledge or internal_only")
      ->check(CLI::IsMember({"with_knowledge", "internal_only"}));
  render_cmd->add_option("--input", input_path, "JSON file with history, pool and mode");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      app.exit(e, out, err);
      return 0;
    }
    err << "error: " << e.what() << "\n\n";
    const CLI::App* failing = &app;
    for (auto* sub : app.get_subcommands()) failing = sub;
    err << failing->help();
    return 1;
  }

  auto selector_config = [&] {
    SelectorConfig c = sel_cfg;
    if (fixed_pool > 0) {
      c.pool_mode = PoolMode::fixed;
      c.fixed_k = fixed_pool;
    }
    c.use_node_attention = !no_node_attention;
    c.validate();
    return c;
  };

  try {
    if (*synth) {
      sc.kind = synth_kind == "triple" ? KbKind::triple : KbKind::document;
      if (seed) sc.seed = *seed;
      auto corpus = gen_synthetic(sc);
      cd::write_file(kb_path, serialize_kb(corpus.kb));
      cd::write_file(corpus_path, to_jsonl(corpus.dialogues));
      out << nlohmann::json{{"kb", kb_path}, {"corpus", corpus_path}, {"dialogues", corpus.dialogues.size()}}.dump()
          << '\n';
    } else if (*unify_cmd) {
      auto g = cd::load_graph("", kb_path, kb_kind);
      std::string text = to_json(g).dump() + '\n';
      if (out_path.empty())
        out << text;
      else
        cd::write_file(out_path, text);
    } else if (*train_cmd) {
      auto g = cd::load_graph(graph_path, kb_path, kb_kind);
      auto provider = make_provider(embeddings, tc.dims.d_in);
      tc.dims.d_in = provider->dimension();
      tc.dims.d_state = tc.dims.d_in;
      tc.losses = {!no_walk, !no_node, !no_knowledge};
      tc.precision = precision_from_string(precision);
      if (seed) tc.seed = *seed;
      Selector selector(g, *provider, selector_config());
      auto corpus = cd::load_corpus(corpus_path);
      std::vector<DialogueSample> heldout;
      if (!heldout_path.empty()) heldout = cd::load_corpus(heldout_path);
      try {
        auto result = train(selector, corpus, tc, heldout);
        save_checkpoint(result.params, ckpt_path);
        if (!log_path.empty()) cd::write_file(log_path, result.report.to_jsonl());
        out << to_json(result.report.epochs.back()).dump() << '\n';
      } catch (const TrainingDiverged& e) {
        save_checkpoint(e.last_good(), ckpt_path);
        if (!log_path.empty()) cd::write_file(log_path, e.report().to_jsonl());
        throw;
      }
    } else if (*eval_cmd) {
      auto g = cd::load_graph(graph_path, kb_path, kb_kind);
      auto params = load_checkpoint(ckpt_path);
      auto provider = make_provider(embeddings, params.dims.d_in);
      Selector selector(g, *provider, selector_config());
      auto corpus = cd::load_corpus(corpus_path);
      if (seeds.empty()) seeds.push_back(seed.value_or(1));
      auto run = run_eval(selector, corpus, params, seeds, ks);
      std::string text = to_json(run.report).dump(2) + '\n';
      if (out_path.empty())
        out << text;
      else
        cd::write_file(out_path, text);
      if (!ranks_path.empty()) cd::write_file(ranks_path, ranks_csv(run.ranks));
    } else if (*select_cmd) {
      auto g = cd::load_graph(graph_path, kb_path, kb_kind);
      auto params = load_checkpoint(ckpt_path);
      auto provider = make_provider(embeddings, params.dims.d_in);
      Selector selector(g, *provider, selector_config());
      DialogueSample s;
      s.history = history;
      s.utterance = utterance;
      if (!start_node.empty()) s.start_node = start_node;
      out << to_json(selector.select(params, s)).dump(2) << '\n';
    } else if (*serve_cmd) {
      BundlePaths paths{graph_path, ckpt_path, embeddings, selector_config()};
      SelectionService service(load_bundle(paths), service_opt, paths);
      httplib::Server server;
      service.mount(server);
      err << "serving on " << host << ':' << port << std::endl;
      if (!server.listen(host, port)) throw Error("cannot bind " + host + ":" + std::to_string(port));
    } else if (*render_cmd) {
      PromptMode m = prompt_mode_from_string(mode);
      if (!input_path.empty()) {
        auto j = read_json_file(input_path);
        try {
          if (j.contains("history")) history = detail::string_array(j, "history", false);
          pool = detail::pool_texts(j);
          if (j.contains("mode")) m = prompt_mode_from_string(detail::string_field(j, "mode"));
        } catch (const FieldError& e) {
          throw ValidationError(input_path + ": " + e.message);
        }
      }
      out << render_prompt(history, pool, m);
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}

}  // namespace gate
