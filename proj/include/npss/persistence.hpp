#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "npss/errors.hpp"
#include "npss/model.hpp"
#include "npss/run_config.hpp"
#include "npss/trainer.hpp"

namespace npss {

inline constexpr std::uint16_t kSnapshotVersion = 1;
inline constexpr std::uint16_t kCheckpointVersion = 1;
/// magic + version + R + n_class + D_c
inline constexpr std::size_t kSnapshotHeaderBytes = 4 + 2 + 3 * 4;

namespace io {

class Writer {
 public:
  void bytes(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  void magic(const char (&m)[5]) { bytes(m, 4); }
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) { le(v); }
  void u32(std::uint32_t v) { le(v); }
  void u64(std::uint64_t v) { le(v); }
  void f32(float v) { le(std::bit_cast<std::uint32_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  const std::string& data() const { return buf_; }

 private:
  template <class U>
  void le(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::string buf_;
};

class Reader {
 public:
  Reader(const std::string& data, std::string what) : data_(data), what_(std::move(what)) {}

  void expect_magic(const char (&m)[5]) {
    need(4);
    if (std::memcmp(data_.data() + pos_, m, 4) != 0) throw FormatError(what_ + ": bad magic, expected " + std::string(m, 4));
    pos_ += 4;
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(data_[pos_++]);
  }
  std::uint16_t u16() { return le<std::uint16_t>(); }
  std::uint32_t u32() { return le<std::uint32_t>(); }
  std::uint64_t u64() { return le<std::uint64_t>(); }
  float f32() { return std::bit_cast<float>(le<std::uint32_t>()); }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t position() const { return pos_; }
  bool at_end() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) throw FormatError(what_ + ": truncated file");
  }
  template <class U>
  U le() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }
  const std::string& data_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline std::string read_all(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot open " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_all(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw DataError("cannot write " + p.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for " + p.string());
}

}  // namespace io

// ---------------------------------------------------------------------------
// Center snapshot: "NPSS", u16 version, u32 R, u32 n_class, u32 D_c, then for the context
// and the target family in turn: n_class x R f32 centers followed by n_class u8 flags.
// ---------------------------------------------------------------------------

namespace detail {

inline void write_centers(io::Writer& w, const CenterSet<float>& cs) {
  for (std::size_t c = 0; c < cs.centers.size(); ++c)
    for (int j = 0; j < cs.dim; ++j) w.f32(cs.populated[c] ? cs.centers[c][static_cast<std::size_t>(j)] : 0.0f);
  for (bool p : cs.populated) w.u8(p ? 1 : 0);
}

inline CenterSet<float> read_centers(io::Reader& r, int n_class, int dim) {
  CenterSet<float> cs(n_class, dim);
  std::vector<std::vector<float>> vals(static_cast<std::size_t>(n_class), std::vector<float>(static_cast<std::size_t>(dim)));
  for (auto& v : vals)
    for (auto& x : v) x = r.f32();
  for (int c = 0; c < n_class; ++c) {
    const std::uint8_t flag = r.u8();
    if (flag > 1) throw FormatError("center snapshot: bad populated flag");
    if (flag) cs.set(c, vals[static_cast<std::size_t>(c)]);
  }
  return cs;
}

}  // namespace detail

inline void write_snapshot(io::Writer& w, const CenterSnapshot<float>& s) {
  w.magic("NPSS");
  w.u16(kSnapshotVersion);
  w.u32(static_cast<std::uint32_t>(s.reduced_channels));
  w.u32(static_cast<std::uint32_t>(s.n_class));
  w.u32(static_cast<std::uint32_t>(s.context_dim));
  detail::write_centers(w, s.context);
  detail::write_centers(w, s.target);
}

inline CenterSnapshot<float> read_snapshot(io::Reader& r) {
  r.expect_magic("NPSS");
  const auto version = r.u16();
  if (version != kSnapshotVersion) throw FormatError("center snapshot: unsupported version " + std::to_string(version));
  CenterSnapshot<float> s;
  s.reduced_channels = static_cast<int>(r.u32());
  s.n_class = static_cast<int>(r.u32());
  s.context_dim = static_cast<int>(r.u32());
  if (s.reduced_channels < 1 || s.n_class < 1 || s.context_dim < 1 || s.reduced_channels > 1 << 16 || s.n_class > 1 << 16)
    throw FormatError("center snapshot: implausible header");
  s.context = detail::read_centers(r, s.n_class, s.reduced_channels);
  s.target = detail::read_centers(r, s.n_class, s.reduced_channels);
  return s;
}

inline void save_snapshot(const std::filesystem::path& path, const CenterSnapshot<float>& s) {
  io::Writer w;
  write_snapshot(w, s);
  io::write_all(path, w.data());
}

inline CenterSnapshot<float> load_snapshot(const std::filesystem::path& path) {
  const auto bytes = io::read_all(path);
  io::Reader r(bytes, path.string());
  auto s = read_snapshot(r);
  if (!r.at_end()) throw FormatError(path.string() + ": trailing bytes after center snapshot");
  return s;
}

// ---------------------------------------------------------------------------
// Checkpoint: "NPCK", u16 version, config text (u32 length + bytes), u64 step count,
// u32 parameter count, then per parameter u32 element count and the values as LE f32,
// then a center snapshot. Momentum buffers are not stored.
// ---------------------------------------------------------------------------

struct Checkpoint {
  RunConfig config;
  int n_class = 0;
  std::int64_t step = 0;
  NpSegModel<float> model;
};

inline std::string encode_checkpoint(const RunConfig& cfg, NpSegModel<float>& model, std::int64_t step) {
  io::Writer w;
  w.magic("NPCK");
  w.u16(kCheckpointVersion);
  w.str(serialize(cfg) + "n_class=" + std::to_string(model.config().head.n_class) + "\n");
  w.u64(static_cast<std::uint64_t>(step));
  const auto params = model.parameters();
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto* p : params) {
    w.u32(static_cast<std::uint32_t>(p->value.size()));
    for (float v : p->value.data()) w.f32(v);
  }
  write_snapshot(w, model.export_centers());
  return w.data();
}

inline void save_checkpoint(const std::filesystem::path& path, const RunConfig& cfg, NpSegModel<float>& model,
                            std::int64_t step) {
  io::write_all(path, encode_checkpoint(cfg, model, step));
}

inline Checkpoint decode_checkpoint(const std::string& bytes, const std::string& what = "checkpoint") {
  io::Reader r(bytes, what);
  r.expect_magic("NPCK");
  const auto version = r.u16();
  if (version != kCheckpointVersion) throw FormatError(what + ": unsupported version " + std::to_string(version));
  std::string text = r.str();
  const auto pos = text.rfind("n_class=");
  if (pos == std::string::npos) throw FormatError(what + ": config echo lacks n_class");
  Checkpoint ck;
  try {
    ck.n_class = std::stoi(text.substr(pos + 8));
  } catch (const std::exception&) {
    throw FormatError(what + ": bad n_class in config echo");
  }
  ck.config = parse_run_config(text.substr(0, pos));
  ck.step = static_cast<std::int64_t>(r.u64());
  ck.model = NpSegModel<float>(ck.config.train.model_config(ck.n_class));
  auto params = ck.model.parameters();
  const std::uint32_t count = r.u32();
  if (count != params.size())
    throw FormatError(what + ": " + std::to_string(count) + " parameters stored, model has " + std::to_string(params.size()));
  for (auto* p : params) {
    if (r.u32() != p->value.size()) throw FormatError(what + ": size mismatch for " + p->name);
    for (auto& v : p->value.data()) v = r.f32();
  }
  ck.model.import_centers(read_snapshot(r));
  if (!r.at_end()) throw FormatError(what + ": trailing bytes");
  return ck;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(io::read_all(path), path.string());
}

// ---------------------------------------------------------------------------
// Versioned CSV
// ---------------------------------------------------------------------------

inline constexpr const char* kMetricsSchema = "npss-metrics-v1";
inline constexpr const char* kTrainLogSchema = "npss-trainlog-v1";
inline constexpr const char* kBenchSchema = "npss-bench-v1";

/// First line "# schema=<name>", then a column header, then rows.
struct CsvTable {
  std::string schema;
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  std::string str() const {
    auto join = [](const std::vector<std::string>& v) {
      std::string s;
      for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + v[i];
      return s + "\n";
    };
    std::string out = "# schema=" + schema + "\n" + join(columns);
    for (const auto& r : rows) out += join(r);
    return out;
  }

  const std::string& cell(std::size_t row, const std::string& column) const {
    for (std::size_t i = 0; i < columns.size(); ++i)
      if (columns[i] == column) return rows.at(row).at(i);
    throw FormatError("csv: no column '" + column + "'");
  }
};

inline CsvTable parse_csv(const std::string& text, const std::string& expected_schema) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.rfind("# schema=", 0) != 0) throw FormatError("csv: missing schema header");
  CsvTable t;
  t.schema = line.substr(9);
  if (t.schema != expected_schema) throw FormatError("csv: unsupported schema '" + t.schema + "', expected " + expected_schema);
  auto split = [](const std::string& l) {
    std::vector<std::string> out;
    std::size_t start = 0;
    for (std::size_t comma; (comma = l.find(',', start)) != std::string::npos; start = comma + 1)
      out.push_back(l.substr(start, comma - start));
    out.push_back(l.substr(start));
    return out;
  };
  if (!std::getline(in, line)) throw FormatError("csv: missing column header");
  t.columns = split(line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto row = split(line);
    if (row.size() != t.columns.size()) throw FormatError("csv: row width differs from header");
    t.rows.push_back(std::move(row));
  }
  return t;
}

}  // namespace npss
