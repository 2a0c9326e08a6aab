#include "cfirn/glyph_data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "cfirn/error.hpp"
#include "cfirn/hash.hpp"

namespace fs = std::filesystem;

namespace cfirn {

std::string_view to_string(FontRole role) { return role == FontRole::query ? "query" : "gallery"; }

std::optional<FontRole> parse_font_role(std::string_view text) {
  if (text == "query" || text == "query-font" || text == "0") return FontRole::query;
  if (text == "gallery" || text == "gallery-font" || text == "1") return FontRole::gallery;
  return std::nullopt;
}

fs::path DatasetManifest::resolve(const ManifestEntry& entry) const {
  fs::path p(entry.path);
  return p.is_absolute() ? p : root / p;
}

std::vector<int> DatasetManifest::classes() const {
  std::set<int> s;
  for (const ManifestEntry& e : entries) s.insert(e.class_id);
  return {s.begin(), s.end()};
}

namespace {

std::string canonical_row(const ManifestEntry& e) {
  return e.path + '\t' + std::to_string(e.class_id) + '\t' + std::string(to_string(e.font)) + '\n';
}

}  // namespace

DatasetManifest make_manifest(fs::path root, const std::vector<ManifestEntry>& rows) {
  DatasetManifest m;
  m.root = std::move(root);
  std::map<std::string, std::size_t> by_path;
  for (const ManifestEntry& row : rows) {
    auto [it, inserted] = by_path.emplace(row.path, m.entries.size());
    if (!inserted) {
      if (!(m.entries[it->second] == row)) {
        throw ValidationError("image " + row.path + " is listed with conflicting class/font labels");
      }
      continue;
    }
    m.entries.push_back(row);
  }
  std::set<int> classes;
  Sha256 h;
  for (const ManifestEntry& e : m.entries) {
    classes.insert(e.class_id);
    h.update(canonical_row(e));
  }
  m.class_count = static_cast<int>(classes.size());
  m.checksum = h.hex_digest();
  return m;
}

DatasetManifest load_manifest(const fs::path& path, bool check_files) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  std::vector<ManifestEntry> rows;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (;;) {
      const std::size_t tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (fields.size() != 3) {
      throw ParseError("expected 3 tab-separated fields, got " + std::to_string(fields.size()), line_no);
    }
    ManifestEntry e;
    e.path = fields[0];
    if (e.path.empty()) throw ParseError("empty path", line_no);
    const auto& cls = fields[1];
    auto [ptr, ec] = std::from_chars(cls.data(), cls.data() + cls.size(), e.class_id);
    if (ec != std::errc() || ptr != cls.data() + cls.size() || e.class_id < 0) {
      throw ParseError("class_id must be a non-negative integer, got '" + cls + "'", line_no);
    }
    auto font = parse_font_role(fields[2]);
    if (!font) throw ParseError("unknown font '" + fields[2] + "' (expected query or gallery)", line_no);
    e.font = *font;
    rows.push_back(std::move(e));
  }
  if (rows.empty()) throw ValidationError("empty manifest");

  DatasetManifest m = make_manifest(path.parent_path(), rows);
  if (check_files) {
    std::vector<std::string> missing;
    std::size_t missing_count = 0;
    for (const ManifestEntry& e : m.entries) {
      if (!fs::exists(m.resolve(e))) {
        ++missing_count;
        if (missing.size() < 10) missing.push_back(e.path);
      }
    }
    if (missing_count) {
      std::ostringstream os;
      os << missing_count << " image file(s) missing:";
      for (const auto& p : missing) os << ' ' << p;
      if (missing_count > missing.size()) os << " ...";
      throw ValidationError(os.str());
    }
  }
  return m;
}

void write_manifest(const fs::path& path, const DatasetManifest& manifest) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write manifest " + path.string());
  for (const ManifestEntry& e : manifest.entries) out << canonical_row(e);
  if (!out) throw IoError("short write to " + path.string());
}

int holdout_count(int classes, double fraction) {
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw ConfigError("holdout_fraction must lie in (0, 1), got " + std::to_string(fraction));
  }
  if (classes < 2) throw ValidationError("class split needs at least 2 classes, got " + std::to_string(classes));
  const int n = static_cast<int>(std::floor(fraction * classes + 0.5));
  return std::clamp(n, 1, classes - 1);
}

ClassSplit split_by_class(const DatasetManifest& manifest, double holdout_fraction, std::uint64_t seed) {
  std::vector<int> classes = manifest.classes();
  const int n_test = holdout_count(static_cast<int>(classes.size()), holdout_fraction);
  std::mt19937_64 rng(seed);
  std::shuffle(classes.begin(), classes.end(), rng);
  ClassSplit split;
  split.seed = seed;
  split.test_classes.insert(classes.begin(), classes.begin() + n_test);
  split.train_classes.insert(classes.begin() + n_test, classes.end());
  return split;
}

std::vector<ManifestEntry> select_entries(const DatasetManifest& manifest, const std::set<int>& classes,
                                          std::optional<FontRole> font) {
  std::vector<ManifestEntry> out;
  for (const ManifestEntry& e : manifest.entries) {
    if (classes.count(e.class_id) && (!font || e.font == *font)) out.push_back(e);
  }
  return out;
}

Image augment(const Image& image, std::mt19937_64& rng, const AugmentConfig& config) {
  if (!config.enabled) return image;
  const int max_pad = static_cast<int>(std::round(config.max_pad_fraction * std::min(image.width, image.height)));
  std::uniform_int_distribution<int> pad_dist(0, std::max(max_pad, 0));
  const int left = pad_dist(rng);
  const int right = pad_dist(rng);
  const int top = pad_dist(rng);
  const int bottom = pad_dist(rng);
  const int ox = std::uniform_int_distribution<int>(0, left + right)(rng);
  const int oy = std::uniform_int_distribution<int>(0, top + bottom)(rng);
  const bool flip = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < config.flip_probability;

  // Crop window in padded coordinates starts at (ox, oy); padded pixel (px, py)
  // maps to source (px - left, py - top), background outside.
  Image out(image.width, image.height);
  for (int y = 0; y < image.height; ++y) {
    const int sy = y + oy - top;
    for (int x = 0; x < image.width; ++x) {
      const int sx = x + ox - left;
      const bool inside = sx >= 0 && sx < image.width && sy >= 0 && sy < image.height;
      out.at(x, y) = inside ? image.at(sx, sy) : 0.0;
    }
  }
  return flip ? flip_horizontal(out) : out;
}

GlyphSample augment(const GlyphSample& sample, std::mt19937_64& rng, const AugmentConfig& config) {
  GlyphSample out = sample;
  out.image = augment(sample.image, rng, config);
  return out;
}

// --------------------------------------------------------------------------
// Synthetic glyphs

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
  return splitmix(splitmix(splitmix(splitmix(seed) ^ a) ^ (b * 0x100000001B3ull)) ^ (c + 0x51ED27ull));
}

struct Point {
  double x;
  double y;
};

using Stroke = std::vector<Point>;

struct Skeleton {
  std::vector<Stroke> strokes;
  int component = 0;       // stroke displaced by the gallery font
  Point component_shift{};  // gallery-font displacement of that stroke
  double shear = 0.0;       // gallery-font shear
  double bend = 0.0;        // gallery-font stroke bow, signed
  bool query_flipped = false;
};

Skeleton make_skeleton(std::uint64_t seed, int class_id, const SynthOptions& opt) {
  std::mt19937_64 rng(mix_seed(seed, 0xC1A55, static_cast<std::uint64_t>(class_id)));
  std::uniform_real_distribution<double> coord(0.15, 0.85);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Skeleton s;
  const int n_strokes = 3 + static_cast<int>(rng() % 3);
  for (int i = 0; i < n_strokes; ++i) {
    const int n_points = 2 + static_cast<int>(rng() % 2);
    Stroke st;
    Point p{coord(rng), coord(rng)};
    st.push_back(p);
    for (int k = 1; k < n_points; ++k) {
      // Segments of moderate length so strokes read as strokes, not dots.
      const double angle = unit(rng) * 2.0 * std::numbers::pi;
      const double len = 0.2 + 0.35 * unit(rng);
      p = {std::clamp(p.x + len * std::cos(angle), 0.12, 0.88), std::clamp(p.y + len * std::sin(angle), 0.12, 0.88)};
      st.push_back(p);
    }
    s.strokes.push_back(std::move(st));
  }
  s.component = static_cast<int>(rng() % static_cast<std::uint64_t>(n_strokes));
  const double dir = unit(rng) * 2.0 * std::numbers::pi;
  s.component_shift = {0.06 * std::cos(dir), 0.06 * std::sin(dir)};
  s.shear = (unit(rng) < 0.5 ? -1.0 : 1.0) * (0.10 + 0.10 * unit(rng));
  s.bend = (unit(rng) < 0.5 ? -1.0 : 1.0) * (0.03 + 0.04 * unit(rng));
  s.query_flipped = unit(rng) < opt.query_flip_probability;
  return s;
}

double segment_distance(Point p, Point a, Point b) {
  const double dx = b.x - a.x;
  const double dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0.0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double ex = p.x - (a.x + t * dx);
  const double ey = p.y - (a.y + t * dy);
  return std::sqrt(ex * ex + ey * ey);
}

Image rasterize(const std::vector<Stroke>& strokes, double half_width, int size) {
  Image img(size, size);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const Point p{(x + 0.5) / size, (y + 0.5) / size};
      double d = 1e9;
      for (const Stroke& st : strokes) {
        for (std::size_t k = 0; k + 1 < st.size(); ++k) d = std::min(d, segment_distance(p, st[k], st[k + 1]));
      }
      // ~1 pixel anti-aliased edge, quantized to the 8-bit file grid.
      const double v = std::clamp(0.5 - (d - half_width) * size, 0.0, 1.0);
      img.at(x, y) = std::round(v * 255.0) / 255.0;
    }
  }
  return img;
}

/// Random similarity transform about the glyph center, per image.
void apply_pose(std::vector<Stroke>& strokes, std::mt19937_64& rng, double max_rot, double scale_lo, double scale_hi,
                double max_shift) {
  std::uniform_real_distribution<double> rot(-max_rot, max_rot);
  std::uniform_real_distribution<double> scl(scale_lo, scale_hi);
  std::uniform_real_distribution<double> sh(-max_shift, max_shift);
  const double a = rot(rng);
  const double k = scl(rng);
  const double tx = sh(rng);
  const double ty = sh(rng);
  const double c = std::cos(a) * k;
  const double sn = std::sin(a) * k;
  for (Stroke& st : strokes) {
    for (Point& p : st) {
      const double x = p.x - 0.5;
      const double y = p.y - 0.5;
      p = {0.5 + c * x - sn * y + tx, 0.5 + sn * x + c * y + ty};
    }
  }
}

Image render_query(const Skeleton& s, std::mt19937_64& rng, int size) {
  std::normal_distribution<double> jitter(0.0, 0.02);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<Stroke> strokes = s.strokes;
  for (Stroke& st : strokes) {
    for (Point& p : st) {
      p.x += jitter(rng);
      p.y += jitter(rng);
      if (s.query_flipped) p.x = 1.0 - p.x;
    }
  }
  apply_pose(strokes, rng, 0.15, 0.8, 1.05, 0.07);
  // Carving debris: a few short specks unrelated to the character.
  const int specks = static_cast<int>(rng() % 4);
  for (int i = 0; i < specks; ++i) {
    const Point p{0.1 + 0.8 * unit(rng), 0.1 + 0.8 * unit(rng)};
    const double ang = unit(rng) * 2.0 * std::numbers::pi;
    strokes.push_back({p, {p.x + 0.04 * std::cos(ang), p.y + 0.04 * std::sin(ang)}});
  }
  return rasterize(strokes, 0.022, size);
}

Image render_gallery(const Skeleton& s, std::mt19937_64& rng, int size) {
  std::normal_distribution<double> jitter(0.0, 0.01);
  std::normal_distribution<double> shear_noise(0.0, 0.03);
  const double shear = s.shear + shear_noise(rng);
  std::vector<Stroke> strokes;
  for (std::size_t i = 0; i < s.strokes.size(); ++i) {
    // Bow every segment through a displaced midpoint.
    Stroke st;
    for (std::size_t k = 0; k < s.strokes[i].size(); ++k) {
      const Point a = s.strokes[i][k];
      if (k > 0) {
        const Point b = s.strokes[i][k - 1];
        const double dx = a.x - b.x;
        const double dy = a.y - b.y;
        const double len = std::max(std::hypot(dx, dy), 1e-9);
        st.push_back({0.5 * (a.x + b.x) - s.bend * dy / len, 0.5 * (a.y + b.y) + s.bend * dx / len});
      }
      st.push_back(a);
    }
    for (Point& p : st) {
      if (static_cast<int>(i) == s.component) {
        p.x += s.component_shift.x;
        p.y += s.component_shift.y;
      }
      p.x += jitter(rng) + shear * (p.y - 0.5);
      p.y += jitter(rng);
    }
    strokes.push_back(std::move(st));
  }
  apply_pose(strokes, rng, 0.05, 0.9, 1.0, 0.03);
  return rasterize(strokes, 0.045, size);
}

std::string image_name(int class_id, FontRole font, int index) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "images/c%04d_%c%02d.png", class_id, font == FontRole::query ? 'q' : 'g', index);
  return buf;
}

}  // namespace

std::vector<GlyphSample> synth_render(int num_classes, int images_per_class_per_font, std::uint64_t seed,
                                      const SynthOptions& options) {
  if (num_classes < 2) throw ConfigError("synth_generate needs at least 2 classes");
  if (images_per_class_per_font < 1) throw ConfigError("synth_generate needs at least 1 image per font");
  std::vector<GlyphSample> out;
  for (int c = 0; c < num_classes; ++c) {
    const Skeleton skel = make_skeleton(seed, c, options);
    for (FontRole font : {FontRole::query, FontRole::gallery}) {
      for (int i = 0; i < images_per_class_per_font; ++i) {
        std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(c) + 1, static_cast<std::uint64_t>(font) + 1,
                                     static_cast<std::uint64_t>(i) + 1));
        GlyphSample g;
        g.class_id = c;
        g.font = font;
        g.source_path = image_name(c, font, i);
        g.image = font == FontRole::query ? render_query(skel, rng, options.image_size)
                                          : render_gallery(skel, rng, options.image_size);
        out.push_back(std::move(g));
      }
    }
  }
  return out;
}

DatasetManifest synth_generate(int num_classes, int images_per_class_per_font, std::uint64_t seed,
                               const fs::path& out_dir, const SynthOptions& options) {
  const auto samples = synth_render(num_classes, images_per_class_per_font, seed, options);
  try {
    fs::create_directories(out_dir / "images");
  } catch (const fs::filesystem_error& e) {
    throw IoError("cannot create output directory " + out_dir.string() + ": " + e.what());
  }
  std::vector<ManifestEntry> rows;
  for (const GlyphSample& s : samples) {
    write_png(out_dir / s.source_path, s.image);
    rows.push_back({s.source_path, s.class_id, s.font});
  }
  DatasetManifest m = make_manifest(out_dir, rows);
  write_manifest(out_dir / "manifest.tsv", m);
  return m;
}

}  // namespace cfirn
