#pragma once

#include <filesystem>
#include <string>

#include "nback/trials.hpp"

namespace nback {

inline constexpr const char* kTrialSetFormat = "nback-trialset";
inline constexpr int kTrialSetVersion = 1;

std::string serialize_trialset(const TrialSet& set);
TrialSet parse_trialset(const std::string& text);

void save_trialset(const TrialSet& set, const std::filesystem::path& path);
TrialSet load_trialset(const std::filesystem::path& path);

}  // namespace nback
