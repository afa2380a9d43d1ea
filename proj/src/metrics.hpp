#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace steer {

// Lowercase, strip punctuation, split on whitespace.
std::vector<std::string> normalize_tokens(std::string_view text);

// Token-overlap F1 against the best-matching reference. Both sides
// empty scores 1.0; exactly one side empty scores 0.0.
double token_f1(std::string_view prediction, const std::vector<std::string>& references);

}  // namespace steer
