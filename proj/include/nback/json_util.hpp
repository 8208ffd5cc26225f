#pragma once

#include <string>

#include <json.hpp>

#include "nback/error.hpp"

namespace nback::jsonutil {

using json = nlohmann::json;

/// Typed field access; failures become ParseError naming `path`.
template <typename T>
T field(const json& j, const std::string& key, const std::string& path = "") {
  const std::string name = path.empty() ? key : path + "." + key;
  if (!j.is_object()) throw ParseError(path.empty() ? "<root>" : path, "expected an object");
  auto it = j.find(key);
  if (it == j.end()) throw ParseError(name, "missing field");
  try {
    return it->template get<T>();
  } catch (const json::exception& e) {
    throw ParseError(name, e.what());
  }
}

template <typename T>
T field_or(const json& j, const std::string& key, T fallback, const std::string& path = "") {
  if (!j.is_object() || !j.contains(key) || j.at(key).is_null()) return fallback;
  return field<T>(j, key, path);
}

inline json parse_document(const std::string& text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(what, e.what());
  }
}

}  // namespace nback::jsonutil
