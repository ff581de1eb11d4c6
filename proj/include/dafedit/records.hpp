#pragma once

#include <string>
#include <vector>

#include "dafedit/lm.hpp"

namespace dafedit {

// One dataset entry: the edit sample, its paraphrase neighbours (same target)
// and its out-of-scope locality probes (token sequences of full sentences).
struct EditRecord {
  std::string id;
  std::string property;  // recent | popular | long_tail | robust | eval
  TokenSeq edit;
  std::vector<TokenSeq> generality;
  std::vector<std::vector<int>> locality;
};

}  // namespace dafedit
