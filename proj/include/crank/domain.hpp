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

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace crank {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input record. `field()` names the offending field when known.
class ParseError : public Error {
 public:
  ParseError(std::string field, const std::string& what)
      : Error(what), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

class LookupError : public Error {
 public:
  LookupError(std::string key, const std::string& what)
      : Error(what), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Opaque string identifier. Non-empty, no whitespace, compared byte-exact.
template <typename Tag>
class Id {
 public:
  Id() = default;
  explicit Id(std::string value) : value_(std::move(value)) { validate(); }
  explicit Id(std::string_view value) : Id(std::string(value)) {}
  explicit Id(const char* value) : Id(std::string(value)) {}

  const std::string& str() const { return value_; }
  bool empty() const { return value_.empty(); }

  friend bool operator==(const Id&, const Id&) = default;
  friend auto operator<=>(const Id&, const Id&) = default;

 private:
  void validate() const;

  std::string value_;
};

bool is_valid_identifier(std::string_view s);

template <typename Tag>
void Id<Tag>::validate() const {
  if (!is_valid_identifier(value_)) {
    throw ParseError(Tag::kName, std::string("invalid ") + Tag::kName +
                                     " identifier '" + value_ + "'");
  }
}

struct UserTag { static constexpr const char* kName = "user"; };
struct ItemTag { static constexpr const char* kName = "item"; };
struct CarouselTag { static constexpr const char* kName = "carousel"; };
struct CategoryTag { static constexpr const char* kName = "category"; };

using UserId = Id<UserTag>;
using ItemId = Id<ItemTag>;
using CarouselId = Id<CarouselTag>;
using CategoryId = Id<CategoryTag>;

// An immutable ordered list of items. Ranking never reorders them.
class Carousel {
 public:
  Carousel(CarouselId id, std::vector<ItemId> items);

  const CarouselId& id() const { return id_; }
  const std::vector<ItemId>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }

 private:
  CarouselId id_;
  std::vector<ItemId> items_;
};

enum class EventType : std::uint8_t { kView, kClick, kAtc };

std::string_view to_string(EventType e);
// Throws ParseError("event", ...) for anything outside {view, click, atc}.
EventType parse_event_type(std::string_view s);

struct InteractionEvent {
  UserId user;
  CarouselId carousel;
  std::optional<ItemId> item;
  EventType event = EventType::kView;
  std::int64_t ts = 0;

  friend bool operator==(const InteractionEvent&,
                         const InteractionEvent&) = default;
};

// Decodes one line of event JSONL. Unknown fields are ignored.
InteractionEvent parse_event(std::string_view line);
// Compact single-line JSON with a fixed key order.
std::string serialize_event(const InteractionEvent& e);

// Total item -> category mapping.
class CategoryMap {
 public:
  CategoryMap() = default;

  // Re-inserting an item with the same category is a no-op; a conflicting
  // category throws.
  void insert(const ItemId& item, const CategoryId& category);

  const CategoryId& category_of(const ItemId& item) const;
  const CategoryId* find(const ItemId& item) const;
  bool contains(const ItemId& item) const { return find(item) != nullptr; }
  std::size_t size() const { return map_.size(); }

  // Items in insertion order.
  const std::vector<ItemId>& items() const { return order_; }

 private:
  std::unordered_map<std::string, CategoryId> map_;
  std::vector<ItemId> order_;
};

inline const CategoryId& category_of(const CategoryMap& map,
                                     const ItemId& item) {
  return map.category_of(item);
}

CategoryMap load_catalog(const std::string& path);
CategoryMap parse_catalog(std::string_view jsonl);
void write_catalog(const CategoryMap& map, const std::string& path);

std::vector<InteractionEvent> load_events(const std::string& path);

}  // namespace crank

template <typename Tag>
struct std::hash<crank::Id<Tag>> {
  std::size_t operator()(const crank::Id<Tag>& id) const noexcept {
    return std::hash<std::string>{}(id.str());
  }
};
