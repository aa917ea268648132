#pragma once

// Architecture strings such as "1x28x28-20C5-2P2-40C5-2P2-1000N-10N":
//   <C>x<H>x<W>   input channels and spatial size (first token only)
//   <k>C<f>       k feature maps, f x f valid convolution, then ReLU
//   <t>P<s>       t x t pooling region with stride s
//   <u>N          dense layer of u units (ReLU except for the last, softmax)

#include <charconv>
#include <cstddef>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "mpdrop/errors.hpp"

namespace mpd {

struct InputToken {
  std::size_t channels, height, width;
  friend bool operator==(const InputToken&, const InputToken&) = default;
};
struct ConvToken {
  std::size_t maps, filter;
  friend bool operator==(const ConvToken&, const ConvToken&) = default;
};
struct PoolToken {
  std::size_t region, stride;
  friend bool operator==(const PoolToken&, const PoolToken&) = default;
};
struct DenseToken {
  std::size_t units;
  friend bool operator==(const DenseToken&, const DenseToken&) = default;
};

using ArchToken = std::variant<InputToken, ConvToken, PoolToken, DenseToken>;

// Activation extents after a token; dense outputs are (units, 1, 1).
struct Shape3 {
  std::size_t c, h, w;
  [[nodiscard]] std::size_t size() const { return c * h * w; }
  friend bool operator==(const Shape3&, const Shape3&) = default;
};

struct ArchSpec {
  std::string source;
  std::vector<ArchToken> tokens;
  std::vector<Shape3> shapes;  // shapes[i] is the output of tokens[i]

  [[nodiscard]] const InputToken& input() const { return std::get<InputToken>(tokens.front()); }
  [[nodiscard]] std::size_t n_classes() const { return shapes.back().c; }

  // e.g. "1x28x28 -> 20x24x24 -> ... -> 40x4x4 -> 640 -> 1000 -> 10"
  [[nodiscard]] std::string shape_chain() const {
    std::string out;
    bool flattened = false;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      const Shape3& s = shapes[i];
      if (std::holds_alternative<DenseToken>(tokens[i])) {
        if (!flattened) {
          out += " -> " + std::to_string(shapes[i - 1].size());
          flattened = true;
        }
        out += " -> " + std::to_string(s.c);
      } else {
        if (i != 0) out += " -> ";
        out += std::to_string(s.c) + "x" + std::to_string(s.h) + "x" + std::to_string(s.w);
      }
    }
    return out;
  }
};

namespace detail {

inline std::size_t parse_count(std::string_view text, std::string_view token) {
  std::size_t value = 0;
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (text.empty() || ec != std::errc() || ptr != end) {
    throw ParseError("malformed architecture token '" + std::string(token) + "'");
  }
  if (value == 0) {
    throw ParseError("architecture token '" + std::string(token) + "' has a zero size");
  }
  return value;
}

}  // namespace detail

[[nodiscard]] inline ArchSpec parse_arch(std::string_view text) {
  ArchSpec spec;
  spec.source = std::string(text);
  std::vector<std::string_view> parts;
  for (std::size_t start = 0;;) {
    const std::size_t dash = text.find('-', start);
    parts.push_back(text.substr(start, dash == std::string_view::npos ? text.npos : dash - start));
    if (dash == std::string_view::npos) break;
    start = dash + 1;
  }
  if (parts.size() < 2) throw ParseError("architecture needs an input and at least one dense layer");

  {
    const std::string_view tok = parts[0];
    const std::size_t x1 = tok.find('x');
    const std::size_t x2 = x1 == tok.npos ? tok.npos : tok.find('x', x1 + 1);
    if (x1 == tok.npos || x2 == tok.npos) {
      throw ParseError("malformed input token '" + std::string(tok) + "', expected CxHxW");
    }
    InputToken in{detail::parse_count(tok.substr(0, x1), tok),
                  detail::parse_count(tok.substr(x1 + 1, x2 - x1 - 1), tok),
                  detail::parse_count(tok.substr(x2 + 1), tok)};
    spec.tokens.emplace_back(in);
    spec.shapes.push_back({in.channels, in.height, in.width});
  }

  bool in_dense = false;
  for (std::size_t i = 1; i < parts.size(); ++i) {
    const std::string_view tok = parts[i];
    if (tok.empty()) throw ParseError("empty architecture token");
    const char kind = tok.back();
    const Shape3 prev = spec.shapes.back();
    if (kind == 'N') {
      const std::size_t units = detail::parse_count(tok.substr(0, tok.size() - 1), tok);
      spec.tokens.emplace_back(DenseToken{units});
      spec.shapes.push_back({units, 1, 1});
      in_dense = true;
      continue;
    }
    const std::size_t sep = tok.find_first_of("CP");
    if (sep == tok.npos || sep + 1 >= tok.size()) {
      throw ParseError("malformed architecture token '" + std::string(tok) + "'");
    }
    if (in_dense) {
      throw ParseError("token '" + std::string(tok) + "' follows a dense layer");
    }
    const std::size_t a = detail::parse_count(tok.substr(0, sep), tok);
    const std::size_t b = detail::parse_count(tok.substr(sep + 1), tok);
    if (tok[sep] == 'C') {
      if (b > prev.h || b > prev.w) {
        throw ParseError("token '" + std::string(tok) + "': filter exceeds its " +
                         std::to_string(prev.h) + "x" + std::to_string(prev.w) + " input");
      }
      spec.tokens.emplace_back(ConvToken{a, b});
      spec.shapes.push_back({a, prev.h - b + 1, prev.w - b + 1});
    } else {
      if (a > prev.h || a > prev.w) {
        throw ParseError("token '" + std::string(tok) + "': pooling region exceeds its " +
                         std::to_string(prev.h) + "x" + std::to_string(prev.w) + " input");
      }
      spec.tokens.emplace_back(PoolToken{a, b});
      spec.shapes.push_back({prev.c, (prev.h - a) / b + 1, (prev.w - a) / b + 1});
    }
  }
  if (!in_dense) throw ParseError("architecture must end with at least one dense layer");
  return spec;
}

inline constexpr std::string_view kMnistArch = "1x28x28-20C5-2P2-40C5-2P2-1000N-10N";
inline constexpr std::string_view kCifar10Arch =
    "3x32x32-96C5-3P2-128C3-3P2-256C3-3P2-2000N-2000N-10N";
inline constexpr std::string_view kCifar100Arch =
    "3x32x32-96C5-3P2-128C3-3P2-256C3-3P2-2000N-2000N-100N";

// Preset name ("mnist", "cifar10", "cifar100") or a literal architecture string.
[[nodiscard]] inline ArchSpec resolve_arch(std::string_view preset_or_string) {
  if (preset_or_string == "mnist") return parse_arch(kMnistArch);
  if (preset_or_string == "cifar10") return parse_arch(kCifar10Arch);
  if (preset_or_string == "cifar100") return parse_arch(kCifar100Arch);
  return parse_arch(preset_or_string);
}

}  // namespace mpd
