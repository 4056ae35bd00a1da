#include "crt/run.hpp"

namespace crt {

RecallTaskSpec recall_spec(const RunConfig& cfg) {
  RecallTaskSpec spec{cfg.recall_alphabet, cfg.model.seg_len, cfg.recall_gap};
  spec.validate();
  return spec;
}

RunData load_run_data(RunConfig& cfg) {
  RunData out;
  std::size_t vocab = 0;
  if (cfg.task == "recall") {
    const RecallTaskSpec spec = recall_spec(cfg);
    // Held-out episodes come from a different stream of the same seed.
    out.train = gen_recall(spec, cfg.recall_episodes, cfg.corpus_seed);
    out.eval = gen_recall(spec, cfg.recall_eval_episodes, cfg.corpus_seed ^ 0x5bd1e995ULL);
    vocab = spec.vocab();
  } else {
    Corpus corpus = cfg.corpus.empty()
                        ? ingest_text(synthetic_text(cfg.synthetic_bytes, cfg.corpus_seed), cfg.tokenizer,
                                      cfg.valid_fraction)
                        : ingest(cfg.corpus, cfg.tokenizer, cfg.valid_fraction);
    out.train = TokenStream::unmasked(corpus.train(), cfg.model.seg_len);
    out.eval = TokenStream::unmasked(corpus.valid(), cfg.model.seg_len);
    vocab = corpus.vocab.size();
    out.vocab = std::move(corpus.vocab);
  }
  if (cfg.model.vocab != 0 && cfg.model.vocab != vocab) {
    throw ConfigError("vocab", "config vocab " + std::to_string(cfg.model.vocab) + " does not match the data (" +
                                   std::to_string(vocab) + " symbols)");
  }
  cfg.model.vocab = vocab;
  return out;
}

}  // namespace crt
