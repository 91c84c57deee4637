#pragma once

// On-disk formats: SAFT tensors, indexed-PNG masks, JSON-lines records and
// versioned model files.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "saflab/features.hpp"
#include "saflab/image.hpp"
#include "saflab/matrix.hpp"
#include "saflab/tubes.hpp"
#include "saflab/weak_classify.hpp"

namespace saflab {

namespace fs = std::filesystem;

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class DType : std::uint8_t { f32 = 1, u8 = 2 };

/// Dense row-major tensor; exactly one of `f32` / `u8` holds the payload.
struct Tensor {
  DType dtype = DType::f32;
  std::vector<std::uint32_t> dims;
  std::vector<float> f32;
  std::vector<std::uint8_t> u8;

  [[nodiscard]] std::size_t numel() const;
  friend bool operator==(const Tensor&, const Tensor&) = default;
};

inline constexpr std::uint16_t kSaftVersion = 1;

void write_tensor(const fs::path& path, const Tensor& t);
Tensor read_tensor(const fs::path& path);

void write_matrix(const fs::path& path, const Matrix& m);
Matrix read_matrix(const fs::path& path);

/// T x H x W x 3 u8.
void write_frames(const fs::path& path, std::span<const RgbImage> frames);
std::vector<RgbImage> read_frames(const fs::path& path);

/// T x H x W x 2 f32; works for displacement and flow fields.
template <typename Tag>
void write_fields(const fs::path& path, std::span<const VectorField<Tag>> fields);
template <typename Tag>
std::vector<VectorField<Tag>> read_fields(const fs::path& path);

/// T x H x W u8.
void write_masks(const fs::path& path, std::span<const Mask> masks);
std::vector<Mask> read_masks(const fs::path& path);

/// 8-bit PNG, 0 = background, i = instance i (1-based). Class ids are not
/// stored in the image.
void write_label_png(const fs::path& path, const InstanceMaskSet& instances);
InstanceMaskSet read_label_png(const fs::path& path);

void write_tubes(const fs::path& path, const TubeSet& tubes);
/// `frames_per_sequence` recovers the sequence of each tube from its
/// global frame indices.
TubeSet read_tubes(const fs::path& path, int frames_per_sequence);

struct SessionEntry {
  int cluster_id = 0;
  int frame_index = 0;  // global frame index
  int instance_index = 0;
  std::optional<int> label;
  friend bool operator==(const SessionEntry&, const SessionEntry&) = default;
};

void write_session(const fs::path& path, std::span<const SessionEntry> entries);
std::vector<SessionEntry> read_session(const fs::path& path);

void write_standardizer(const fs::path& path, const Standardizer& s);
Standardizer read_standardizer(const fs::path& path);

void write_head(const fs::path& path, const ProjectionHead& head);
ProjectionHead read_head(const fs::path& path);
void write_classifier(const fs::path& path, const ClassifierMLP& model);
ClassifierMLP read_classifier(const fs::path& path);

/// Writes `text` followed by nothing else; parent directories are created.
void write_text(const fs::path& path, const std::string& text);
std::string read_text(const fs::path& path);

}  // namespace saflab
