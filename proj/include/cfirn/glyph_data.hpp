#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "cfirn/image.hpp"

namespace cfirn {

/// Which side of a cross-font pair an image belongs to: the undeciphered
/// (query) script or the annotated gallery script.
enum class FontRole : std::uint8_t { query = 0, gallery = 1 };

std::string_view to_string(FontRole role);
/// Accepts "query", "gallery", "query-font", "gallery-font", "0", "1".
std::optional<FontRole> parse_font_role(std::string_view text);

struct GlyphSample {
  Image image;
  int class_id = 0;
  FontRole font = FontRole::query;
  std::string source_path;
};

struct ManifestEntry {
  std::string path;  // as written in the manifest, relative to its directory
  int class_id = 0;
  FontRole font = FontRole::query;

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

/// Tab-separated `path<TAB>class_id<TAB>font` rows, one image per row.
struct DatasetManifest {
  std::filesystem::path root;
  std::vector<ManifestEntry> entries;
  int class_count = 0;
  std::string checksum;

  std::filesystem::path resolve(const ManifestEntry& entry) const;
  /// Distinct class ids, ascending.
  std::vector<int> classes() const;
};

/// Dedups rows (first occurrence wins) and fills class_count / checksum.
DatasetManifest make_manifest(std::filesystem::path root, const std::vector<ManifestEntry>& rows);
DatasetManifest load_manifest(const std::filesystem::path& path, bool check_files = true);
void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);

struct ClassSplit {
  std::set<int> train_classes;
  std::set<int> test_classes;
  std::uint64_t seed = 0;
};

/// round-half-up(fraction * classes), clamped to [1, classes - 1].
int holdout_count(int classes, double fraction);
ClassSplit split_by_class(const DatasetManifest& manifest, double holdout_fraction, std::uint64_t seed);

/// Entries whose class is in `classes`, optionally restricted to one font.
std::vector<ManifestEntry> select_entries(const DatasetManifest& manifest, const std::set<int>& classes,
                                          std::optional<FontRole> font = std::nullopt);

struct AugmentConfig {
  bool enabled = true;
  double max_pad_fraction = 0.125;  // per side, relative to image side
  double flip_probability = 0.5;
};

/// Random padding, random crop back to the original size, random horizontal
/// flip. Size and [0, 1] range are preserved.
Image augment(const Image& image, std::mt19937_64& rng, const AugmentConfig& config);
GlyphSample augment(const GlyphSample& sample, std::mt19937_64& rng, const AugmentConfig& config);

struct SynthOptions {
  int image_size = 128;
  double query_flip_probability = 0.5;  // per class
};

/// Deterministic synthetic cross-font corpus. Each class gets a random
/// stroke skeleton.
///   query font: thin strokes, point jitter, an optional per-class
///     left-right flip, a per-image pose (rotation up to 0.15 rad, scale
///     0.8 to 1.05, shift) and up to 3 short debris specks.
///   gallery font: thick strokes bowed through displaced midpoints, a
///     per-class shear, one displaced component and a milder pose.
/// Writes `out_dir/images/*.png` and `out_dir/manifest.tsv`.
DatasetManifest synth_generate(int num_classes, int images_per_class_per_font, std::uint64_t seed,
                               const std::filesystem::path& out_dir, const SynthOptions& options = {});

/// In-memory variant used by tests; same pixels as the files written above.
std::vector<GlyphSample> synth_render(int num_classes, int images_per_class_per_font, std::uint64_t seed,
                                      const SynthOptions& options = {});

}  // namespace cfirn
