#include "nback/trialset_io.hpp"

#include <fstream>
#include <sstream>

#include "nback/json_util.hpp"

namespace nback {

using jsonutil::field;
using json = nlohmann::json;

std::string serialize_trialset(const TrialSet& set) {
  json doc;
  doc["format"] = kTrialSetFormat;
  doc["version"] = kTrialSetVersion;
  doc["generator_version"] = set.generator_version;
  doc["alphabet"] = set.alphabet.letters();
  doc["lag"] = set.lag;
  doc["length"] = set.length;
  doc["demo_length"] = set.demo_length;
  doc["matches"] = set.matches;
  doc["lure_policy"] = to_string(set.lure_policy);
  doc["base_seed"] = set.base_seed;
  doc["index_base"] = 1;
  json trials = json::array();
  for (const Trial& t : set.trials) {
    trials.push_back({{"id", t.id},
                      {"seed", t.seed},
                      {"demo", to_string(t.demo)},
                      {"demo_matches", t.demo_matches},
                      {"test", to_string(t.test)},
                      {"test_matches", t.test_matches}});
  }
  doc["trials"] = std::move(trials);
  return doc.dump(2) + "\n";
}

namespace {

LetterSeq letters_field(const json& j, const std::string& key, const std::string& path) {
  const auto s = field<std::string>(j, key, path);
  try {
    return to_letters(s);
  } catch (const InvariantViolation& e) {
    throw ParseError(path + "." + key, e.what());
  }
}

}  // namespace

TrialSet parse_trialset(const std::string& text) {
  const json doc = jsonutil::parse_document(text, "trialset");
  if (field<std::string>(doc, "format") != kTrialSetFormat) throw ParseError("format", "not an nback trial set");
  const int version = field<int>(doc, "version");
  if (version != kTrialSetVersion)
    throw ParseError("version", "unsupported version " + std::to_string(version));
  if (field<int>(doc, "index_base") != 1) throw ParseError("index_base", "only 1-based files are supported");

  TrialSet set;
  set.generator_version = field<std::string>(doc, "generator_version");
  try {
    set.alphabet = Alphabet(field<std::string>(doc, "alphabet"));
  } catch (const InvariantViolation& e) {
    throw ParseError("alphabet", e.what());
  }
  set.lag = field<int>(doc, "lag");
  set.length = field<int>(doc, "length");
  set.demo_length = field<int>(doc, "demo_length");
  set.matches = field<int>(doc, "matches");
  set.lure_policy = lure_policy_from_string(field<std::string>(doc, "lure_policy"));
  set.base_seed = field<std::uint64_t>(doc, "base_seed");

  const auto trials = field<json>(doc, "trials");
  if (!trials.is_array()) throw ParseError("trials", "expected an array");
  for (std::size_t k = 0; k < trials.size(); ++k) {
    const std::string path = "trials[" + std::to_string(k) + "]";
    const json& tj = trials[k];
    Trial t;
    t.id = field<int>(tj, "id", path);
    t.lag = set.lag;
    t.seed = field<std::uint64_t>(tj, "seed", path);
    t.demo = letters_field(tj, "demo", path);
    t.demo_matches = field<std::vector<int>>(tj, "demo_matches", path);
    t.test = letters_field(tj, "test", path);
    t.test_matches = field<std::vector<int>>(tj, "test_matches", path);
    set.trials.push_back(std::move(t));
  }
  validate_trialset(set);
  return set;
}

void save_trialset(const TrialSet& set, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << serialize_trialset(set);
  if (!out) throw Error("write failed: " + path.string());
}

TrialSet load_trialset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_trialset(buf.str());
}

}  // namespace nback
