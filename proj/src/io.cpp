#include "saflab/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>
#include <opencv2/imgcodecs.hpp>

namespace saflab {

static_assert(std::endian::native == std::endian::little, "payloads are written in host order");

using ojson = nlohmann::ordered_json;

namespace {

void ensure_parent(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
}

std::ofstream open_out(const fs::path& path) {
  ensure_parent(path);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  return out;
}

std::ifstream open_in(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for reading: " + path.string());
  return in;
}

template <typename T>
void put(std::ostream& out, T v) {
  std::uint8_t b[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) b[i] = static_cast<std::uint8_t>(static_cast<std::uint64_t>(v) >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), sizeof(T));
}

template <typename T>
T get(std::istream& in, const fs::path& path) {
  std::uint8_t b[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(b), sizeof(T))) throw FormatError("truncated file: " + path.string());
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return static_cast<T>(v);
}

void read_exact(std::istream& in, void* dst, std::size_t n, const fs::path& path) {
  if (!in.read(static_cast<char*>(dst), static_cast<std::streamsize>(n))) {
    throw FormatError("truncated payload: " + path.string());
  }
}

std::size_t product(std::span<const std::uint32_t> dims) {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

}  // namespace

std::size_t Tensor::numel() const { return product(dims); }

void write_tensor(const fs::path& path, const Tensor& t) {
  const std::size_t n = t.numel();
  if ((t.dtype == DType::f32 ? t.f32.size() : t.u8.size()) != n) {
    throw std::invalid_argument("write_tensor: payload does not match dims");
  }
  auto out = open_out(path);
  out.write("SAFT", 4);
  put<std::uint16_t>(out, kSaftVersion);
  put<std::uint8_t>(out, static_cast<std::uint8_t>(t.dtype));
  put<std::uint8_t>(out, static_cast<std::uint8_t>(t.dims.size()));
  for (auto d : t.dims) put<std::uint32_t>(out, d);
  if (t.dtype == DType::f32) {
    out.write(reinterpret_cast<const char*>(t.f32.data()), static_cast<std::streamsize>(n * sizeof(float)));
  } else {
    out.write(reinterpret_cast<const char*>(t.u8.data()), static_cast<std::streamsize>(n));
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

Tensor read_tensor(const fs::path& path) {
  auto in = open_in(path);
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "SAFT", 4) != 0) {
    throw FormatError("bad magic (expected SAFT): " + path.string());
  }
  const auto version = get<std::uint16_t>(in, path);
  if (version != kSaftVersion) throw FormatError("unsupported SAFT version " + std::to_string(version));
  Tensor t;
  const auto code = get<std::uint8_t>(in, path);
  if (code != 1 && code != 2) throw FormatError("unknown dtype code " + std::to_string(code));
  t.dtype = static_cast<DType>(code);
  const auto ndim = get<std::uint8_t>(in, path);
  for (int i = 0; i < ndim; ++i) t.dims.push_back(get<std::uint32_t>(in, path));
  const std::size_t n = t.numel();
  if (t.dtype == DType::f32) {
    t.f32.resize(n);
    read_exact(in, t.f32.data(), n * sizeof(float), path);
  } else {
    t.u8.resize(n);
    read_exact(in, t.u8.data(), n, path);
  }
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes: " + path.string());
  return t;
}

void write_matrix(const fs::path& path, const Matrix& m) {
  Tensor t;
  t.dims = {static_cast<std::uint32_t>(m.rows), static_cast<std::uint32_t>(m.cols)};
  t.f32 = m.data;
  write_tensor(path, t);
}

Matrix read_matrix(const fs::path& path) {
  Tensor t = read_tensor(path);
  if (t.dtype != DType::f32 || t.dims.size() != 2) throw FormatError("expected a 2-d f32 tensor: " + path.string());
  Matrix m;
  m.rows = t.dims[0];
  m.cols = t.dims[1];
  m.data = std::move(t.f32);
  return m;
}

void write_frames(const fs::path& path, std::span<const RgbImage> frames) {
  Tensor t;
  t.dtype = DType::u8;
  const Size s = frames.empty() ? Size{0, 0} : frames.front().size();
  t.dims = {static_cast<std::uint32_t>(frames.size()), static_cast<std::uint32_t>(s.height),
            static_cast<std::uint32_t>(s.width), 3};
  for (const auto& f : frames) {
    require_same_size(f.size(), s, "write_frames");
    t.u8.insert(t.u8.end(), f.bytes().begin(), f.bytes().end());
  }
  write_tensor(path, t);
}

std::vector<RgbImage> read_frames(const fs::path& path) {
  const Tensor t = read_tensor(path);
  if (t.dtype != DType::u8 || t.dims.size() != 4 || t.dims[3] != 3) throw FormatError("expected T x H x W x 3 u8");
  const Size s{static_cast<int>(t.dims[2]), static_cast<int>(t.dims[1])};
  std::vector<RgbImage> out;
  for (std::uint32_t k = 0; k < t.dims[0]; ++k) {
    RgbImage img(s);
    std::memcpy(img.bytes().data(), t.u8.data() + k * s.area() * 3, s.area() * 3);
    out.push_back(std::move(img));
  }
  return out;
}

template <typename Tag>
void write_fields(const fs::path& path, std::span<const VectorField<Tag>> fields) {
  Tensor t;
  const Size s = fields.empty() ? Size{0, 0} : fields.front().size();
  t.dims = {static_cast<std::uint32_t>(fields.size()), static_cast<std::uint32_t>(s.height),
            static_cast<std::uint32_t>(s.width), 2};
  t.f32.reserve(t.numel());
  for (const auto& f : fields) {
    require_same_size(f.size(), s, "write_fields");
    for (std::size_t i = 0; i < s.area(); ++i) {
      t.f32.push_back(f[i].dx);
      t.f32.push_back(f[i].dy);
    }
  }
  write_tensor(path, t);
}

template <typename Tag>
std::vector<VectorField<Tag>> read_fields(const fs::path& path) {
  const Tensor t = read_tensor(path);
  if (t.dtype != DType::f32 || t.dims.size() != 4 || t.dims[3] != 2) throw FormatError("expected T x H x W x 2 f32");
  const Size s{static_cast<int>(t.dims[2]), static_cast<int>(t.dims[1])};
  std::vector<VectorField<Tag>> out;
  std::size_t p = 0;
  for (std::uint32_t k = 0; k < t.dims[0]; ++k) {
    VectorField<Tag> f(s);
    for (std::size_t i = 0; i < s.area(); ++i, p += 2) f[i] = Vec2f{t.f32[p], t.f32[p + 1]};
    out.push_back(std::move(f));
  }
  return out;
}

template void write_fields<DisplacementTag>(const fs::path&, std::span<const DisplacementField>);
template void write_fields<FlowTag>(const fs::path&, std::span<const FlowField>);
template std::vector<DisplacementField> read_fields<DisplacementTag>(const fs::path&);
template std::vector<FlowField> read_fields<FlowTag>(const fs::path&);

void write_masks(const fs::path& path, std::span<const Mask> masks) {
  Tensor t;
  t.dtype = DType::u8;
  const Size s = masks.empty() ? Size{0, 0} : masks.front().size();
  t.dims = {static_cast<std::uint32_t>(masks.size()), static_cast<std::uint32_t>(s.height),
            static_cast<std::uint32_t>(s.width)};
  for (const auto& m : masks) {
    require_same_size(m.size(), s, "write_masks");
    t.u8.insert(t.u8.end(), m.pixels().begin(), m.pixels().end());
  }
  write_tensor(path, t);
}

std::vector<Mask> read_masks(const fs::path& path) {
  const Tensor t = read_tensor(path);
  if (t.dtype != DType::u8 || t.dims.size() != 3) throw FormatError("expected T x H x W u8");
  const Size s{static_cast<int>(t.dims[2]), static_cast<int>(t.dims[1])};
  std::vector<Mask> out;
  for (std::uint32_t k = 0; k < t.dims[0]; ++k) {
    Mask m(s);
    std::memcpy(m.pixels().data(), t.u8.data() + k * s.area(), s.area());
    out.push_back(std::move(m));
  }
  return out;
}

void write_label_png(const fs::path& path, const InstanceMaskSet& instances) {
  if (instances.count() > 255) throw std::invalid_argument("write_label_png: more than 255 instances");
  const Mask labels = instances.label_map();
  ensure_parent(path);
  cv::Mat img(instances.size.height, instances.size.width, CV_8UC1, const_cast<std::uint8_t*>(labels.pixels().data()));
  if (!cv::imwrite(path.string(), img, {cv::IMWRITE_PNG_COMPRESSION, 1})) throw std::runtime_error("cannot write PNG: " + path.string());
}

InstanceMaskSet read_label_png(const fs::path& path) {
  const cv::Mat img = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (img.empty()) throw FormatError("cannot decode PNG: " + path.string());
  if (img.type() != CV_8UC1) throw FormatError("expected an 8-bit single-channel PNG: " + path.string());
  Mask labels(Size{img.cols, img.rows});
  for (int y = 0; y < img.rows; ++y) std::memcpy(&labels.at(0, y), img.ptr<std::uint8_t>(y), static_cast<std::size_t>(img.cols));
  return InstanceMaskSet::from_label_map(labels);
}

void write_tubes(const fs::path& path, const TubeSet& tubes) {
  auto out = open_out(path);
  for (const auto& tube : tubes.tubes) {
    for (const auto& e : tube.entries) {
      out << ojson{{"tube", tube.id}, {"frame", e.frame}, {"instance", e.instance}}.dump() << '\n';
    }
  }
}

TubeSet read_tubes(const fs::path& path, int frames_per_sequence) {
  if (frames_per_sequence <= 0) throw std::invalid_argument("read_tubes: frames_per_sequence must be positive");
  auto in = open_in(path);
  std::map<int, Tube> by_id;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    ojson j;
    try {
      j = ojson::parse(line);
      Tube& t = by_id[j.at("tube").get<int>()];
      t.id = j.at("tube").get<int>();
      const TubeEntry e{j.at("frame").get<int>(), j.at("instance").get<int>()};
      if (!t.entries.empty() && e.frame <= t.entries.back().frame) {
        throw FormatError("tube frames must be strictly increasing");
      }
      t.sequence = e.frame / frames_per_sequence;
      t.entries.push_back(e);
    } catch (const nlohmann::json::exception& ex) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + ex.what());
    }
  }
  TubeSet set;
  for (auto& [id, t] : by_id) set.tubes.push_back(std::move(t));
  return set;
}

void write_session(const fs::path& path, std::span<const SessionEntry> entries) {
  std::ostringstream out;
  for (const auto& e : entries) {
    ojson j{{"cluster_id", e.cluster_id}, {"frame_index", e.frame_index}, {"instance_index", e.instance_index}};
    j["label"] = e.label ? ojson(*e.label) : ojson(nullptr);
    out << j.dump() << '\n';
  }
  // Write-then-rename so a reader never sees a half-written session.
  const fs::path tmp = fs::path(path.string() + ".tmp");
  write_text(tmp, out.str());
  fs::rename(tmp, path);
}

std::vector<SessionEntry> read_session(const fs::path& path) {
  auto in = open_in(path);
  std::vector<SessionEntry> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = ojson::parse(line);
      SessionEntry e;
      e.cluster_id = j.at("cluster_id").get<int>();
      e.frame_index = j.at("frame_index").get<int>();
      e.instance_index = j.at("instance_index").get<int>();
      if (!j.at("label").is_null()) e.label = j.at("label").get<int>();
      out.push_back(e);
    } catch (const nlohmann::json::exception& ex) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + ex.what());
    }
  }
  return out;
}

void write_standardizer(const fs::path& path, const Standardizer& s) {
  write_text(path, ojson{{"v", 1}, {"mean", s.mean}, {"scale", s.scale}}.dump() + "\n");
}

Standardizer read_standardizer(const fs::path& path) {
  try {
    const auto j = ojson::parse(read_text(path));
    Standardizer s;
    s.mean = j.at("mean").get<std::vector<double>>();
    s.scale = j.at("scale").get<std::vector<double>>();
    if (s.mean.size() != s.scale.size()) throw FormatError("standardizer: mean/scale length mismatch");
    return s;
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(path.string() + ": " + ex.what());
  }
}

namespace {

// Model file: "SAFM", u16 version, u8 kind, u64 seed, u32 tensor count, then
// per tensor: u8 name length, name, u8 ndim, u32 dims, f32 payload.
constexpr std::uint16_t kModelVersion = 1;
constexpr std::uint8_t kKindHead = 1;
constexpr std::uint8_t kKindClassifier = 2;

struct NamedTensor {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> values;
};

void write_model(const fs::path& path, std::uint8_t kind, std::uint64_t seed, const std::vector<NamedTensor>& tensors) {
  auto out = open_out(path);
  out.write("SAFM", 4);
  put<std::uint16_t>(out, kModelVersion);
  put<std::uint8_t>(out, kind);
  put<std::uint64_t>(out, seed);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.dims.size()));
    for (auto d : t.dims) put<std::uint32_t>(out, d);
    out.write(reinterpret_cast<const char*>(t.values.data()), static_cast<std::streamsize>(t.values.size() * sizeof(float)));
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::vector<NamedTensor> read_model(const fs::path& path, std::uint8_t kind, std::uint64_t& seed) {
  auto in = open_in(path);
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "SAFM", 4) != 0) throw FormatError("bad magic (expected SAFM): " + path.string());
  if (get<std::uint16_t>(in, path) != kModelVersion) throw FormatError("unsupported model version: " + path.string());
  if (get<std::uint8_t>(in, path) != kind) throw FormatError("unexpected model kind: " + path.string());
  seed = get<std::uint64_t>(in, path);
  const auto n = get<std::uint32_t>(in, path);
  std::vector<NamedTensor> out;
  for (std::uint32_t k = 0; k < n; ++k) {
    NamedTensor t;
    t.name.resize(get<std::uint8_t>(in, path));
    read_exact(in, t.name.data(), t.name.size(), path);
    const auto ndim = get<std::uint8_t>(in, path);
    for (int i = 0; i < ndim; ++i) t.dims.push_back(get<std::uint32_t>(in, path));
    t.values.resize(product(t.dims));
    read_exact(in, t.values.data(), t.values.size() * sizeof(float), path);
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<float> take(std::span<const float> p, std::size_t& offset, std::size_t n) {
  std::vector<float> out(p.begin() + static_cast<std::ptrdiff_t>(offset), p.begin() + static_cast<std::ptrdiff_t>(offset + n));
  offset += n;
  return out;
}

const NamedTensor& expect(const std::vector<NamedTensor>& ts, std::size_t i, const char* name, std::size_t ndim) {
  if (i >= ts.size() || ts[i].name != name || ts[i].dims.size() != ndim) {
    throw FormatError(std::string("model file: expected tensor '") + name + "'");
  }
  return ts[i];
}

void load_flat(std::span<float> dst, const std::vector<NamedTensor>& ts) {
  std::size_t p = 0;
  for (const auto& t : ts) {
    if (t.name.rfind("running_", 0) == 0) continue;
    if (p + t.values.size() > dst.size()) throw FormatError("model file: parameter count mismatch");
    std::copy(t.values.begin(), t.values.end(), dst.begin() + static_cast<std::ptrdiff_t>(p));
    p += t.values.size();
  }
  if (p != dst.size()) throw FormatError("model file: parameter count mismatch");
}

}  // namespace

void write_head(const fs::path& path, const ProjectionHead& head) {
  const auto in = static_cast<std::uint32_t>(head.in_dim());
  const auto h = static_cast<std::uint32_t>(head.hidden_dim());
  const auto o = static_cast<std::uint32_t>(head.out_dim());
  const auto p = head.params();
  std::size_t off = 0;
  std::vector<NamedTensor> ts;
  ts.push_back({"w1", {h, in}, take(p, off, std::size_t{h} * in)});
  ts.push_back({"b1", {h}, take(p, off, h)});
  ts.push_back({"w2", {o, h}, take(p, off, std::size_t{o} * h)});
  ts.push_back({"b2", {o}, take(p, off, o)});
  write_model(path, kKindHead, head.seed(), ts);
}

ProjectionHead read_head(const fs::path& path) {
  std::uint64_t seed = 0;
  const auto ts = read_model(path, kKindHead, seed);
  const auto& w1 = expect(ts, 0, "w1", 2);
  const auto& w2 = expect(ts, 2, "w2", 2);
  expect(ts, 1, "b1", 1);
  expect(ts, 3, "b2", 1);
  ProjectionHead head(w1.dims[1], w1.dims[0], w2.dims[0], seed);
  load_flat(head.params(), ts);
  return head;
}

void write_classifier(const fs::path& path, const ClassifierMLP& model) {
  const auto in = static_cast<std::uint32_t>(model.in_dim());
  const auto h = static_cast<std::uint32_t>(model.hidden_dim());
  const auto c = static_cast<std::uint32_t>(model.n_classes());
  const auto p = model.params();
  std::size_t off = 0;
  std::vector<NamedTensor> ts;
  ts.push_back({"w1", {h, in}, take(p, off, std::size_t{h} * in)});
  ts.push_back({"b1", {h}, take(p, off, h)});
  ts.push_back({"gamma", {h}, take(p, off, h)});
  ts.push_back({"beta", {h}, take(p, off, h)});
  ts.push_back({"w2", {c, h}, take(p, off, std::size_t{c} * h)});
  ts.push_back({"b2", {c}, take(p, off, c)});
  ts.push_back({"running_mean", {h}, model.running_mean()});
  ts.push_back({"running_var", {h}, model.running_var()});
  write_model(path, kKindClassifier, model.seed(), ts);
}

ClassifierMLP read_classifier(const fs::path& path) {
  std::uint64_t seed = 0;
  const auto ts = read_model(path, kKindClassifier, seed);
  const auto& w1 = expect(ts, 0, "w1", 2);
  const auto& w2 = expect(ts, 4, "w2", 2);
  const auto& rm = expect(ts, 6, "running_mean", 1);
  const auto& rv = expect(ts, 7, "running_var", 1);
  ClassifierMLP model(w1.dims[1], w1.dims[0], w2.dims[0], seed);
  load_flat(model.params(), ts);
  model.running_mean() = rm.values;
  model.running_var() = rv.values;
  return model;
}

void write_text(const fs::path& path, const std::string& text) {
  auto out = open_out(path);
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::string read_text(const fs::path& path) {
  auto in = open_in(path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace saflab
