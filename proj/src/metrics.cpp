#include "metrics.hpp"

#include <algorithm>
#include <cctype>
#include <map>

#include "common.hpp"

namespace steer {

std::vector<std::string> normalize_tokens(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  for (char c : text) {
    const unsigned char u = static_cast<unsigned char>(c);
    if (std::isspace(u)) {
      if (!current.empty()) {
        tokens.push_back(current);
        current.clear();
      }
    } else if (!std::ispunct(u)) {
      current.push_back(static_cast<char>(std::tolower(u)));
    }
  }
  if (!current.empty()) tokens.push_back(current);
  return tokens;
}

double token_f1(std::string_view prediction, const std::vector<std::string>& references) {
  if (references.empty()) {
    fail(ErrorCode::invalid_argument, "token_f1: references must be non-empty");
  }
  const auto pred = normalize_tokens(prediction);
  double best = 0.0;
  for (const auto& reference : references) {
    const auto ref = normalize_tokens(reference);
    if (pred.empty() && ref.empty()) {
      best = std::max(best, 1.0);
      continue;
    }
    if (pred.empty() || ref.empty()) {
      continue;  // 0.0
    }
    std::map<std::string, int> counts;
    for (const auto& t : ref) ++counts[t];
    int overlap = 0;
    for (const auto& t : pred) {
      auto it = counts.find(t);
      if (it != counts.end() && it->second > 0) {
        --it->second;
        ++overlap;
      }
    }
    if (overlap == 0) continue;
    const double precision = static_cast<double>(overlap) / static_cast<double>(pred.size());
    const double recall = static_cast<double>(overlap) / static_cast<double>(ref.size());
    best = std::max(best, 2.0 * precision * recall / (precision + recall));
  }
  return best;
}

}  // namespace steer
