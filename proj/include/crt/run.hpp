#pragma once

#include "crt/config.hpp"
#include "crt/data.hpp"

namespace crt {

struct RunData {
  TokenStream train;
  TokenStream eval;  // validation split, or held-out recall episodes
  Vocab vocab;       // empty for the recall task
};

/// Builds the train/eval streams for `cfg.task` and fixes cfg.model.vocab to
/// match. A nonzero configured vocab that disagrees is a ConfigError.
RunData load_run_data(RunConfig& cfg);

RecallTaskSpec recall_spec(const RunConfig& cfg);

}  // namespace crt
