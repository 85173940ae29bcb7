#include "msfm/features.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

namespace msfm {

namespace {

static_assert(std::endian::native == std::endian::little,
              "feature files are little-endian; big-endian hosts unsupported");

std::uint32_t read_u32(std::span<const std::uint8_t> b, std::size_t off) {
  std::uint32_t v = 0;
  std::memcpy(&v, b.data() + off, 4);
  return v;
}

float read_f32(std::span<const std::uint8_t> b, std::size_t off) {
  float v = 0;
  std::memcpy(&v, b.data() + off, 4);
  return v;
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + 4);
}

void put_f32(std::vector<std::uint8_t>& out, float v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + 4);
}

Error format_error(std::size_t offset, const std::string& what) {
  return Error(ErrorCode::kFormat,
               "feature file: " + what + " at byte offset " +
                   std::to_string(offset));
}

}  // namespace

FeatureSet parse_features(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "MSFT", 4) != 0) {
    throw format_error(0, "bad magic");
  }
  if (bytes.size() < kFeatureHeaderBytes) {
    throw format_error(bytes.size(), "truncated header");
  }
  const std::uint32_t version = read_u32(bytes, 4);
  if (version != kFeatureFileVersion) {
    throw format_error(4, "unsupported version " + std::to_string(version));
  }
  FeatureSet fs;
  fs.image_id = read_u32(bytes, 8);
  fs.width = read_u32(bytes, 12);
  fs.height = read_u32(bytes, 16);
  const std::uint32_t count = read_u32(bytes, 20);
  const std::size_t payload = bytes.size() - kFeatureHeaderBytes;
  const std::size_t expected = std::size_t{count} * kFeatureRecordBytes;
  if (payload < expected) {
    throw format_error(bytes.size(), "truncated payload (expected " +
                                         std::to_string(expected) +
                                         " record bytes)");
  }
  if (payload != expected) {
    throw format_error(kFeatureHeaderBytes + expected,
                       "record length mismatch (descriptor length != 128)");
  }
  fs.features.resize(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t off = kFeatureHeaderBytes + i * kFeatureRecordBytes;
    Feature& f = fs.features[i];
    f.x = read_f32(bytes, off);
    f.y = read_f32(bytes, off + 4);
    f.scale = read_f32(bytes, off + 8);
    f.orientation = read_f32(bytes, off + 12);
    std::memcpy(f.descriptor.data(), bytes.data() + off + 16, kDescriptorSize);
    if (!(f.x >= 0.0F && f.x < static_cast<float>(fs.width) && f.y >= 0.0F &&
          f.y < static_cast<float>(fs.height))) {
      throw format_error(off, "keypoint outside image bounds");
    }
    if (!(f.scale > 0.0F) || !std::isfinite(f.scale)) {
      throw format_error(off + 8, "non-positive scale");
    }
  }
  sort_by_scale(fs);
  fs.coarse_count = fs.features.size();
  return fs;
}

FeatureSet load_features(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return parse_features(bytes);
}

std::vector<std::uint8_t> serialize_features(const FeatureSet& fs) {
  std::vector<std::uint8_t> out;
  out.reserve(kFeatureHeaderBytes + fs.size() * kFeatureRecordBytes);
  out.insert(out.end(), {'M', 'S', 'F', 'T'});
  put_u32(out, kFeatureFileVersion);
  put_u32(out, fs.image_id);
  put_u32(out, fs.width);
  put_u32(out, fs.height);
  put_u32(out, static_cast<std::uint32_t>(fs.size()));
  for (const Feature& f : fs.features) {
    put_f32(out, f.x);
    put_f32(out, f.y);
    put_f32(out, f.scale);
    put_f32(out, f.orientation);
    out.insert(out.end(), f.descriptor.begin(), f.descriptor.end());
  }
  return out;
}

void write_features(const std::filesystem::path& path, const FeatureSet& fs) {
  const auto bytes = serialize_features(fs);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

void sort_by_scale(FeatureSet& fs) {
  std::stable_sort(fs.features.begin(), fs.features.end(),
                   [](const Feature& a, const Feature& b) {
                     return a.scale > b.scale;
                   });
}

std::size_t top_scale_count(std::size_t n, double eta,
                            std::size_t small_image_limit) {
  if (!(eta > 0.0 && eta <= 100.0)) {
    throw Error(ErrorCode::kArgument, "eta must be in (0, 100]");
  }
  if (n < small_image_limit) return n;
  // Round before ceil so 20% of 1000 is exactly 200 despite binary floats.
  const double raw = eta / 100.0 * static_cast<double>(n);
  const double snapped = std::round(raw * 1e6) / 1e6;
  return std::min(n, static_cast<std::size_t>(std::ceil(snapped)));
}

FeatureSet select_top_scale(FeatureSet fs, double eta) {
  fs.coarse_count = top_scale_count(fs.size(), eta);
  return fs;
}

int scale_level(double scale, const ScaleQuantization& q) {
  return static_cast<int>(
      std::lround(std::log2(scale / q.sigma0) * q.intervals_per_octave));
}

double scale_coverage(const FeatureSet& fs, double eta,
                      const ScaleQuantization& q) {
  if (fs.features.empty()) {
    throw Error(ErrorCode::kArgument, "scale_coverage of an empty set");
  }
  const std::size_t tier = top_scale_count(fs.size(), eta);
  std::set<int> all;
  std::set<int> top;
  for (std::size_t i = 0; i < fs.size(); ++i) {
    const int level = scale_level(fs.features[i].scale, q);
    all.insert(level);
    if (i < tier) top.insert(level);
  }
  return static_cast<double>(top.size()) / static_cast<double>(all.size());
}

std::filesystem::path feature_file_name(ImageId id) {
  std::ostringstream name;
  name << "img_" << std::setw(5) << std::setfill('0') << id << ".msft";
  return name.str();
}

FeatureStore FeatureStore::load_dir(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) {
    throw Error(ErrorCode::kIo, "not a directory: " + dir.string());
  }
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.path().extension() == ".msft") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  FeatureStore store;
  for (const auto& f : files) store.add(load_features(f));

  const auto calib = dir / "calibration.txt";
  if (std::filesystem::exists(calib)) {
    std::ifstream in(calib);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty() || line[0] == '#') continue;
      std::istringstream ls(line);
      ImageId id = 0;
      Intrinsics k;
      if (!(ls >> id >> k.focal >> k.cx >> k.cy)) {
        throw Error(ErrorCode::kFormat, "calibration.txt: bad line: " + line);
      }
      store.set_intrinsics(id, k);
    }
  }
  return store;
}

void FeatureStore::write_dir(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  for (const auto& [id, fs] : sets_) {
    write_features(dir / feature_file_name(id), fs);
  }
  if (!intrinsics_.empty()) {
    std::ofstream out(dir / "calibration.txt");
    out << std::setprecision(17);
    for (const auto& [id, k] : intrinsics_) {
      out << id << ' ' << k.focal << ' ' << k.cx << ' ' << k.cy << '\n';
    }
  }
}

void FeatureStore::add(FeatureSet fs) {
  const ImageId id = fs.image_id;
  if (sets_.count(id) != 0) {
    throw Error(ErrorCode::kArgument,
                "duplicate image id " + std::to_string(id));
  }
  sets_.emplace(id, std::move(fs));
}

void FeatureStore::set_intrinsics(ImageId id, const Intrinsics& k) {
  intrinsics_[id] = k;
}

const FeatureSet& FeatureStore::get(ImageId id) const {
  auto it = sets_.find(id);
  if (it == sets_.end()) {
    throw Error(ErrorCode::kArgument,
                "no features for image " + std::to_string(id));
  }
  return it->second;
}

std::vector<ImageId> FeatureStore::image_ids() const {
  std::vector<ImageId> ids;
  ids.reserve(sets_.size());
  for (const auto& kv : sets_) ids.push_back(kv.first);
  return ids;
}

Intrinsics FeatureStore::intrinsics(ImageId id) const {
  if (auto it = intrinsics_.find(id); it != intrinsics_.end()) {
    return it->second;
  }
  const FeatureSet& fs = get(id);
  Intrinsics k;
  k.focal = 1.2 * std::max(fs.width, fs.height);
  k.cx = fs.width / 2.0;
  k.cy = fs.height / 2.0;
  return k;
}

void FeatureStore::apply_tier(double eta) {
  for (auto& [id, fs] : sets_) fs.coarse_count = top_scale_count(fs.size(), eta);
}

}  // namespace msfm
