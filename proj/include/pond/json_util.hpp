#pragma once

#include <initializer_list>
#include <string>
#include <string_view>

#include "pond/container.hpp"
#include "pond/errors.hpp"

namespace pond {

// Throws ConfigError unless `j` is an object whose keys all appear in `allowed`.
void check_keys(const Json& j, std::initializer_list<std::string_view> allowed, std::string_view where);

// Reads j[key] into `out` when present; a wrong type is a ConfigError.
template <class T>
void read_key(const Json& j, const char* key, T& out, std::string_view where) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->template get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(std::string(where) + "." + key + " has the wrong type");
  }
}

}  // namespace pond
