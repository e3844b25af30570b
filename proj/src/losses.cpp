#include "elgan/losses.hpp"

namespace elgan {

std::string to_string(AdvLoss l) { return l == AdvLoss::cross_entropy ? "ce" : "emb"; }

AdvLoss parse_adv_loss(const std::string& s) {
  if (s == "ce" || s == "cross_entropy") return AdvLoss::cross_entropy;
  if (s == "emb" || s == "embedding") return AdvLoss::embedding;
  throw ConfigError("unknown adversarial loss '" + s + "' (expected ce or emb)");
}

}  // namespace elgan
