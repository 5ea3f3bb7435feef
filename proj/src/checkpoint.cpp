// Copyright 2026 The billnet Authors
// SPDX-License-Identifier: Apache-2.0

#include "billnet/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

namespace billnet {

namespace {

constexpr std::uint32_t kConfig = section_tag("CONF");
constexpr std::uint32_t kStage = section_tag("STAG");
constexpr std::uint32_t kWeight = section_tag("WGHT");
constexpr std::uint32_t kNorm = section_tag("NORM");
constexpr std::uint32_t kTgap = section_tag("TGAP");
constexpr std::uint32_t kRng = section_tag("RNG ");
constexpr std::uint32_t kEnd = section_tag("END ");

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class Writer {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { raw(&v, 2); }
  void u32(std::uint32_t v) { raw(&v, 4); }
  void i32(std::int32_t v) { raw(&v, 4); }
  void u64(std::uint64_t v) { raw(&v, 8); }
  void f64(double v) { raw(&v, 8); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  std::vector<std::uint8_t>& bytes() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class Reader {
 public:
  Reader(const std::uint8_t* p, std::size_t n) : p_(p), n_(n) {}
  std::uint8_t u8() { return take<std::uint8_t>(); }
  std::uint16_t u16() { return take<std::uint16_t>(); }
  std::uint32_t u32() { return take<std::uint32_t>(); }
  std::int32_t i32() { return take<std::int32_t>(); }
  std::uint64_t u64() { return take<std::uint64_t>(); }
  double f64() { return take<double>(); }
  std::string str() {
    const std::uint32_t len = u32();
    need(len);
    std::string s(reinterpret_cast<const char*>(p_ + pos_), len);
    pos_ += len;
    return s;
  }
  const std::uint8_t* raw(std::size_t n) {
    need(n);
    const std::uint8_t* p = p_ + pos_;
    pos_ += n;
    return p;
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return n_ - pos_; }

 private:
  template <typename T>
  T take() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, p_ + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  void need(std::size_t n) const {
    if (n > n_ - pos_) fail(ErrorKind::kCorruptFile, "checkpoint is truncated");
  }

  const std::uint8_t* p_;
  std::size_t n_;
  std::size_t pos_ = 0;
};

void section(Writer& out, std::uint32_t tag, const std::vector<std::uint8_t>& payload) {
  const std::size_t start = out.bytes().size();
  out.u32(tag);
  out.u64(payload.size());
  out.raw(payload.data(), payload.size());
  const auto& b = out.bytes();
  const uLong crc = crc32(0L, b.data() + start, static_cast<uInt>(b.size() - start));
  out.u32(static_cast<std::uint32_t>(crc));
}

bool packed(const ModelGraph& model) { return model.stage == 5; }

WeightEncoding encoding_of(WeightKind kind, const ModelGraph& model) {
  if (!packed(model)) return WeightEncoding::kFloat64;
  return kind == WeightKind::kDense ? WeightEncoding::kTernaryPlanes : WeightEncoding::kSignBits;
}

void put_bits(Writer& w, const std::vector<bool>& bits) {
  std::vector<std::uint8_t> bytes((bits.size() + 7) / 8, 0);
  for (std::size_t i = 0; i < bits.size(); ++i) {
    if (bits[i]) bytes[i / 8] |= static_cast<std::uint8_t>(1U << (i % 8));
  }
  w.raw(bytes.data(), bytes.size());
}

std::vector<bool> get_bits(Reader& r, std::size_t n) {
  const std::uint8_t* p = r.raw((n + 7) / 8);
  std::vector<bool> bits(n);
  for (std::size_t i = 0; i < n; ++i) bits[i] = (p[i / 8] >> (i % 8)) & 1U;
  return bits;
}

std::vector<std::uint8_t> weight_payload(const ConstWeightRef& ref, WeightEncoding enc) {
  Writer w;
  w.str(ref.name);
  w.u8(static_cast<std::uint8_t>(ref.kind));
  w.u8(static_cast<std::uint8_t>(enc));
  const Shape& s = ref.value->shape();
  for (int d : {s.n, s.t, s.h, s.w, s.c}) w.i32(d);
  const auto& v = ref.value->vec();
  switch (enc) {
    case WeightEncoding::kFloat64:
      for (double x : v) w.f64(x);
      break;
    case WeightEncoding::kSignBits: {
      std::vector<bool> bits(v.size());
      for (std::size_t i = 0; i < v.size(); ++i) bits[i] = quant::sign_strict(v[i]) > 0;
      put_bits(w, bits);
      break;
    }
    case WeightEncoding::kTernaryPlanes: {
      const double delta = quant::tern_threshold(v);
      std::vector<bool> plus(v.size()), minus(v.size());
      for (std::size_t i = 0; i < v.size(); ++i) {
        const int t = quant::ternarize(v[i], delta);
        plus[i] = t > 0;
        minus[i] = t < 0;
      }
      put_bits(w, plus);
      put_bits(w, minus);
      break;
    }
  }
  return std::move(w.bytes());
}

std::vector<std::uint8_t> norm_payload(const NormLayer& n, bool with_bn, bool with_bsn) {
  Writer w;
  w.str(n.name);
  w.u32(static_cast<std::uint32_t>(n.channels()));
  w.u8(with_bn ? 1 : 0);
  w.u8(with_bsn ? 1 : 0);
  if (with_bn) {
    w.f64(n.bn.eps);
    for (const auto* vec : {&n.bn.gamma, &n.bn.beta, &n.bn.mean, &n.bn.var}) {
      for (double x : *vec) w.f64(x);
    }
  }
  if (with_bsn) {
    for (int k : n.bsn.shift) w.u8(static_cast<std::uint8_t>(static_cast<std::int8_t>(k)));
  }
  return std::move(w.bytes());
}

std::vector<MORBlock*> mor_blocks(ModelGraph& model) {
  std::vector<MORBlock*> out;
  for (auto& b : model.blocks) {
    if (auto* m = std::get_if<MORBlock>(&b)) out.push_back(m);
  }
  return out;
}

}  // namespace

std::vector<std::uint8_t> serialize(const ModelGraph& model) {
  Writer out;
  out.raw("BLNT", 4);
  out.u32(kCheckpointVersion);
  {
    const std::string json = model.config.to_json();
    section(out, kConfig, std::vector<std::uint8_t>(json.begin(), json.end()));
  }
  {
    Writer w;
    w.u32(static_cast<std::uint32_t>(model.stage));
    w.u32(static_cast<std::uint32_t>(model.completed_stage));
    section(out, kStage, w.bytes());
  }
  for (const auto& ref : weights(model)) {
    if (packed(model) && weight_bits(ref.kind, model.stage) == 0) continue;  // biases are gone
    section(out, kWeight, weight_payload(ref, encoding_of(ref.kind, model)));
  }
  const bool with_bsn = model.stage >= 4;
  for (const NormLayer* n : norms(model)) section(out, kNorm, norm_payload(*n, !packed(model), with_bsn));
  {
    Writer w;
    std::vector<double> ms;
    for (const auto& b : model.blocks) {
      if (const auto* m = std::get_if<MORBlock>(&b)) ms.push_back(m->tgap_m);
    }
    w.u32(static_cast<std::uint32_t>(ms.size()));
    for (double m : ms) w.f64(m);
    section(out, kTgap, w.bytes());
  }
  {
    Writer w;
    w.str(model.rng_state);
    section(out, kRng, w.bytes());
  }
  section(out, kEnd, {});
  return std::move(out.bytes());
}

ModelGraph deserialize(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes.data(), bytes.size());
  const std::uint8_t* magic = r.raw(4);
  if (std::memcmp(magic, "BLNT", 4) != 0) fail(ErrorKind::kCorruptFile, "bad magic; not a BLNT checkpoint");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    fail(ErrorKind::kVersionMismatch, "checkpoint version " + std::to_string(version) + ", expected " +
                                          std::to_string(kCheckpointVersion));
  }

  struct Section {
    std::uint32_t tag;
    const std::uint8_t* data;
    std::size_t size;
  };
  std::vector<Section> sections;
  bool ended = false;
  while (!ended) {
    const std::size_t start = r.pos();
    const std::uint32_t tag = r.u32();
    const std::uint64_t len = r.u64();
    if (len > r.remaining()) fail(ErrorKind::kCorruptFile, "section length runs past the end of the file");
    const std::uint8_t* data = r.raw(static_cast<std::size_t>(len));
    const std::uint32_t stored = r.u32();
    const uLong crc = crc32(0L, bytes.data() + start, static_cast<uInt>(r.pos() - 4 - start));
    if (stored != static_cast<std::uint32_t>(crc)) fail(ErrorKind::kCorruptFile, "CRC mismatch in a section");
    sections.push_back({tag, data, static_cast<std::size_t>(len)});
    ended = tag == kEnd;
  }
  if (r.remaining() != 0) fail(ErrorKind::kCorruptFile, "trailing bytes after the end section");
  if (sections.size() < 2 || sections[0].tag != kConfig || sections[1].tag != kStage) {
    fail(ErrorKind::kCorruptFile, "checkpoint must start with config and stage sections");
  }

  BillnetConfig cfg;
  try {
    cfg = BillnetConfig::from_json(std::string(reinterpret_cast<const char*>(sections[0].data), sections[0].size));
  } catch (const Error& e) {
    fail(ErrorKind::kCorruptFile, std::string("config section: ") + e.what());
  }
  ModelGraph model = build(cfg);
  {
    Reader s(sections[1].data, sections[1].size);
    const int stage = static_cast<int>(s.u32());
    const int completed = static_cast<int>(s.u32());
    if (stage < 1 || stage > 5 || completed < 0 || completed > stage) fail(ErrorKind::kCorruptFile, "bad stage tags");
    model.stage = stage;
    model.completed_stage = completed;
  }

  std::map<std::string, WeightRef> wmap;
  for (auto& w : weights(model)) wmap.emplace(w.name, w);
  std::map<std::string, NormLayer*> nmap;
  for (NormLayer* n : norms(model)) nmap.emplace(n->name, n);
  std::size_t weights_seen = 0;
  std::size_t norms_seen = 0;

  for (std::size_t i = 2; i < sections.size(); ++i) {
    const Section& sec = sections[i];
    Reader s(sec.data, sec.size);
    if (sec.tag == kWeight) {
      const std::string name = s.str();
      const auto it = wmap.find(name);
      if (it == wmap.end()) fail(ErrorKind::kCorruptFile, "unknown weight '" + name + "'");
      const auto kind = static_cast<WeightKind>(s.u8());
      const auto enc = static_cast<WeightEncoding>(s.u8());
      Shape shape;
      shape.n = s.i32();
      shape.t = s.i32();
      shape.h = s.i32();
      shape.w = s.i32();
      shape.c = s.i32();
      Tensor5& dst = *it->second.value;
      if (kind != it->second.kind || !(shape == dst.shape())) {
        fail(ErrorKind::kCorruptFile, "weight '" + name + "' does not match the configured graph");
      }
      if (enc != encoding_of(kind, model)) fail(ErrorKind::kCorruptFile, "weight '" + name + "' has an encoding inconsistent with its stage");
      const auto n = static_cast<std::size_t>(dst.size());
      switch (enc) {
        case WeightEncoding::kFloat64:
          for (auto& v : dst.vec()) v = s.f64();
          break;
        case WeightEncoding::kSignBits: {
          const auto bits = get_bits(s, n);
          for (std::size_t k = 0; k < n; ++k) dst.vec()[k] = bits[k] ? 1.0 : -1.0;
          break;
        }
        case WeightEncoding::kTernaryPlanes: {
          const auto plus = get_bits(s, n);
          const auto minus = get_bits(s, n);
          for (std::size_t k = 0; k < n; ++k) {
            if (plus[k] && minus[k]) fail(ErrorKind::kCorruptFile, "ternary planes overlap in '" + name + "'");
            dst.vec()[k] = plus[k] ? 1.0 : (minus[k] ? -1.0 : 0.0);
          }
          break;
        }
        default:
          fail(ErrorKind::kCorruptFile, "unknown weight encoding");
      }
      ++weights_seen;
    } else if (sec.tag == kNorm) {
      const std::string name = s.str();
      const auto it = nmap.find(name);
      if (it == nmap.end()) fail(ErrorKind::kCorruptFile, "unknown norm '" + name + "'");
      NormLayer& nl = *it->second;
      const auto c = static_cast<std::size_t>(s.u32());
      if (static_cast<int>(c) != nl.channels()) fail(ErrorKind::kCorruptFile, "norm '" + name + "' channel count differs");
      const bool with_bn = s.u8() != 0;
      const bool with_bsn = s.u8() != 0;
      if (with_bn) {
        nl.bn.eps = s.f64();
        for (auto* vec : {&nl.bn.gamma, &nl.bn.beta, &nl.bn.mean, &nl.bn.var}) {
          for (auto& v : *vec) v = s.f64();
        }
      }
      if (with_bsn) {
        nl.bsn.shift.resize(c);
        for (auto& k : nl.bsn.shift) k = static_cast<std::int8_t>(s.u8());
      }
      ++norms_seen;
    } else if (sec.tag == kTgap) {
      auto blocks = mor_blocks(model);
      if (s.u32() != blocks.size()) fail(ErrorKind::kCorruptFile, "TGAP section does not match the MOR count");
      for (MORBlock* b : blocks) b->tgap_m = s.f64();
    } else if (sec.tag == kRng) {
      model.rng_state = s.str();
    } else if (sec.tag != kEnd) {
      fail(ErrorKind::kCorruptFile, "unknown section tag");
    }
    if (s.remaining() != 0) fail(ErrorKind::kCorruptFile, "section has trailing bytes");
  }
  std::size_t expected_weights = 0;
  for (const auto& [name, ref] : wmap) {
    if (!(packed(model) && weight_bits(ref.kind, model.stage) == 0)) ++expected_weights;
  }
  if (weights_seen != expected_weights || norms_seen != nmap.size()) {
    fail(ErrorKind::kCorruptFile, "checkpoint is missing layers");
  }
  return model;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open '" + path.string() + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::kIo, "short write to '" + path.string() + "'");
}

void save(const ModelGraph& model, const std::filesystem::path& path) { write_file(path, serialize(model)); }

ModelGraph load(const std::filesystem::path& path) { return deserialize(read_file(path)); }

}  // namespace billnet
