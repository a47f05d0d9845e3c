// Copyright 2026 The crank Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "crank/domain.hpp"

#include <cctype>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include "json.hpp"

namespace crank {

using nlohmann::json;

bool is_valid_identifier(std::string_view s) {
  if (s.empty()) return false;
  for (unsigned char ch : s) {
    if (std::isspace(ch)) return false;
  }
  return true;
}

Carousel::Carousel(CarouselId id, std::vector<ItemId> items)
    : id_(std::move(id)), items_(std::move(items)) {
  if (id_.empty()) throw ConfigError("carousel id must be non-empty");
  if (items_.empty()) {
    throw ConfigError("carousel " + id_.str() + " has no items");
  }
  std::unordered_set<std::string> seen;
  for (const auto& item : items_) {
    if (!seen.insert(item.str()).second) {
      throw ConfigError("carousel " + id_.str() + " repeats item " +
                        item.str());
    }
  }
}

std::string_view to_string(EventType e) {
  switch (e) {
    case EventType::kView: return "view";
    case EventType::kClick: return "click";
    case EventType::kAtc: return "atc";
  }
  return "?";
}

EventType parse_event_type(std::string_view s) {
  if (s == "view") return EventType::kView;
  if (s == "click") return EventType::kClick;
  if (s == "atc") return EventType::kAtc;
  throw ParseError("event", "unknown event '" + std::string(s) + "'");
}

namespace {

const json& require(const json& obj, const char* field) {
  auto it = obj.find(field);
  if (it == obj.end() || it->is_null()) {
    throw ParseError(field, std::string("missing required field '") + field +
                                "'");
  }
  return *it;
}

std::string require_string(const json& obj, const char* field) {
  const json& v = require(obj, field);
  if (!v.is_string()) {
    throw ParseError(field, std::string("field '") + field +
                                "' must be a string");
  }
  return v.get<std::string>();
}

template <typename IdT>
IdT make_id(const json& obj, const char* field) {
  std::string s = require_string(obj, field);
  if (!is_valid_identifier(s)) {
    throw ParseError(field, std::string("field '") + field +
                                "' is not a valid identifier");
  }
  return IdT(std::move(s));
}

}  // namespace

InteractionEvent parse_event(std::string_view line) {
  json obj = json::parse(line, nullptr, /*allow_exceptions=*/false);
  if (obj.is_discarded()) throw ParseError("json", "malformed JSON");
  if (!obj.is_object()) throw ParseError("json", "event must be a JSON object");

  InteractionEvent e;
  const json& ts = require(obj, "ts");
  if (!ts.is_number_integer()) {
    throw ParseError("ts", "field 'ts' must be an integer");
  }
  if (ts.is_number_unsigned()) {
    if (ts.get<std::uint64_t>() >
        static_cast<std::uint64_t>(INT64_MAX)) {
      throw ParseError("ts", "field 'ts' out of range");
    }
    e.ts = static_cast<std::int64_t>(ts.get<std::uint64_t>());
  } else {
    e.ts = ts.get<std::int64_t>();
  }
  if (e.ts < 0) throw ParseError("ts", "field 'ts' must be non-negative");

  e.user = make_id<UserId>(obj, "user");
  e.carousel = make_id<CarouselId>(obj, "carousel");
  e.event = parse_event_type(require_string(obj, "event"));
  if (auto it = obj.find("item"); it != obj.end() && !it->is_null()) {
    e.item = make_id<ItemId>(obj, "item");
  }
  if (e.event != EventType::kView && !e.item) {
    throw ParseError("item", std::string("'") +
                                 std::string(to_string(e.event)) +
                                 "' event requires an item");
  }
  return e;
}

std::string serialize_event(const InteractionEvent& e) {
  // ordered_json keeps the documented key order stable on disk.
  nlohmann::ordered_json obj;
  obj["ts"] = e.ts;
  obj["user"] = e.user.str();
  obj["carousel"] = e.carousel.str();
  if (e.item) obj["item"] = e.item->str();
  obj["event"] = std::string(to_string(e.event));
  return obj.dump();
}

void CategoryMap::insert(const ItemId& item, const CategoryId& category) {
  auto [it, inserted] = map_.try_emplace(item.str(), category);
  if (inserted) {
    order_.push_back(item);
    return;
  }
  if (it->second != category) {
    throw ConfigError("item " + item.str() + " mapped to both " +
                      it->second.str() + " and " + category.str());
  }
}

const CategoryId* CategoryMap::find(const ItemId& item) const {
  auto it = map_.find(item.str());
  return it == map_.end() ? nullptr : &it->second;
}

const CategoryId& CategoryMap::category_of(const ItemId& item) const {
  if (const CategoryId* c = find(item)) return *c;
  throw LookupError(item.str(), "unknown item " + item.str());
}

CategoryMap parse_catalog(std::string_view jsonl) {
  CategoryMap map;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < jsonl.size()) {
    std::size_t end = jsonl.find('\n', pos);
    if (end == std::string_view::npos) end = jsonl.size();
    std::string_view line = jsonl.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    json obj = json::parse(line, nullptr, false);
    if (obj.is_discarded() || !obj.is_object()) {
      throw ParseError("", "catalog line " + std::to_string(line_no) +
                               ": malformed JSON");
    }
    map.insert(make_id<ItemId>(obj, "item"),
               make_id<CategoryId>(obj, "category"));
  }
  return map;
}

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

CategoryMap load_catalog(const std::string& path) {
  return parse_catalog(read_file(path));
}

void write_catalog(const CategoryMap& map, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  for (const auto& item : map.items()) {
    nlohmann::ordered_json obj;
    obj["item"] = item.str();
    obj["category"] = map.category_of(item).str();
    out << obj.dump() << '\n';
  }
  if (!out) throw IoError("write failed for " + path);
}

std::vector<InteractionEvent> load_events(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<InteractionEvent> events;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      events.push_back(parse_event(line));
    } catch (const ParseError& err) {
      throw ParseError(err.field(), path + ":" + std::to_string(line_no) +
                                        ": " + err.what());
    }
  }
  return events;
}

}  // namespace crank
