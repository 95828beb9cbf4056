#pragma once

#include <filesystem>
#include <string>

#include "robomt/phonlex.hpp"

namespace robomt::test {

inline const phonlex::PronLexicon& shipped_lexicon() {
  static const auto lex = phonlex::load_cmudict(ROBOMT_TEST_LEXICON);
  return lex;
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("robomt_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace robomt::test
