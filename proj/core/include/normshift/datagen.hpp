#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "normshift/tensor.hpp"

namespace normshift {

inline constexpr std::size_t kImageChannels = 3;
inline constexpr std::size_t kImageSize = 24;
inline constexpr std::size_t kMaxClasses = 10;

inline constexpr std::array<std::string_view, 6> kCorruptionTypes{
    "gaussian_noise", "impulse_noise", "box_blur", "contrast", "brightness", "pixelate"};
inline constexpr std::array<std::string_view, 3> kStyleNames{"invert", "texture_bg", "dilate"};

enum class DomainKind { Source, Corruption, Style };

struct DomainSpec {
  DomainKind kind = DomainKind::Source;
  std::string name;  // corruption type or style name
  int level = 0;     // corruption level, 1..5
  std::uint64_t seed = 0;

  // "source", "corruption:<type>:<level>" or "style:<name>".
  std::string tag() const;
};

// Throws ValidationError on malformed strings, unknown names or level outside 1..5.
DomainSpec parse_domain_spec(std::string_view text, std::uint64_t seed = 0);

struct Dataset {
  Tensor<float> images;  // (N,3,24,24) in [0,1] for clean data
  std::vector<std::int32_t> labels;
  nlohmann::json manifest = nlohmann::json::object();

  std::size_t size() const { return labels.size(); }
};

// Balanced glyph images: label of sample i is i mod K.
Dataset gen_source(std::uint64_t seed, std::size_t n, std::size_t classes = kMaxClasses);

// Level 0 is the identity. Gaussian noise is additive and unclipped; every
// other corruption keeps pixels in [0,1].
Tensor<float> apply_corruption(const Tensor<float>& images, std::string_view type, int level, std::uint64_t seed);
Tensor<float> apply_style(const Tensor<float>& images, std::string_view name, std::uint64_t seed);

// Applies the domain shift of `spec` to a clean dataset, keeping labels.
Dataset apply_domain(const Dataset& clean, const DomainSpec& spec);
// gen_source(spec.seed, n, classes) followed by apply_domain.
Dataset generate_domain(const DomainSpec& spec, std::size_t n, std::size_t classes = kMaxClasses);

// Frozen per-level intensity of a corruption type (index 0 is level 1).
const std::array<double, 5>& corruption_table(std::string_view type);

inline constexpr std::uint32_t kDatasetVersion = 1;

void write_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset read_dataset(const std::filesystem::path& path);

}  // namespace normshift
