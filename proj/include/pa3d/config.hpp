/* Copyright 2026 The pa3d Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

// Flat key=value configuration text. Lines are `key = value`; `#` starts a
// comment; blank lines are ignored; a key may appear once.

#ifndef PA3D_CONFIG_HPP_
#define PA3D_CONFIG_HPP_

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>

#include "pa3d/error.hpp"

namespace pa3d {

inline std::string Trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

using KeyValues = std::map<std::string, std::string>;

inline KeyValues ParseKeyValues(std::string_view text, const std::string& source = "config") {
  KeyValues out;
  std::istringstream in{std::string(text)};
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const std::string t = Trim(line);
    if (t.empty()) continue;
    const std::string where = source + ":" + std::to_string(lineno) + ": ";
    const auto eq = t.find('=');
    Require(eq != std::string::npos, ErrorCode::kFormat, where + "expected key=value");
    const std::string key = Trim(std::string_view(t).substr(0, eq));
    Require(!key.empty(), ErrorCode::kFormat, where + "empty key");
    Require(!out.contains(key), ErrorCode::kFormat, where + "duplicate key '" + key + "'");
    out[key] = Trim(std::string_view(t).substr(eq + 1));
  }
  return out;
}

inline KeyValues LoadKeyValues(const std::filesystem::path& path) {
  std::ifstream in(path);
  Require(static_cast<bool>(in), ErrorCode::kIo, "cannot open config '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return ParseKeyValues(buf.str(), path.string());
}

inline std::string DumpKeyValues(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

}  // namespace pa3d

#endif  // PA3D_CONFIG_HPP_
