#include "msamseg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace msamseg {

namespace {

class Writer {
 public:
  void u32(std::uint32_t v) { put_le(v); }
  void u64(std::uint64_t v) { put_le(v); }
  void f32(float v) { put_le(std::bit_cast<std::uint32_t>(v)); }
  void bytes(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  const std::string& buffer() const { return buf_; }

 private:
  template <typename U>
  void put_le(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string data) : data_(std::move(data)) {}
  std::uint32_t u32() { return get_le<std::uint32_t>(); }
  std::uint64_t u64() { return get_le<std::uint64_t>(); }
  float f32() { return std::bit_cast<float>(get_le<std::uint32_t>()); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string out = data_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  std::string str() { return bytes(u32()); }
  bool at_end() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw FormatError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  template <typename U>
  U get_le() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      v |= static_cast<U>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(U);
    return v;
  }
  std::string data_;
  std::size_t pos_ = 0;
};

}  // namespace

Checkpoint capture_checkpoint(const UNetModel<float>& model, const std::map<std::string, std::string>& metadata) {
  Checkpoint ckpt;
  ckpt.config = model.config();
  ckpt.metadata = metadata;
  for (const auto& p : model.parameters()) {
    ckpt.records.push_back({p.name, p.tensor.shape(), {p.tensor.data().begin(), p.tensor.data().end()}});
  }
  for (const auto& b : model.buffers()) {
    ckpt.records.push_back({b.name, b.tensor.shape(), {b.tensor.data().begin(), b.tensor.data().end()}});
  }
  return ckpt;
}

void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  Writer w;
  w.bytes(kCheckpointMagic, sizeof(kCheckpointMagic));
  w.u32(kCheckpointVersion);
  std::string header = ckpt.config.to_text();
  for (const auto& [key, value] : ckpt.metadata) {
    if (key.find('=') != std::string::npos || value.find('\n') != std::string::npos) {
      throw FormatError("metadata entry '" + key + "' cannot be stored");
    }
    header += "meta." + key + "=" + value + "\n";
  }
  w.str(header);
  w.u32(static_cast<std::uint32_t>(ckpt.records.size()));
  for (const auto& r : ckpt.records) {
    w.str(r.name);
    w.u32(static_cast<std::uint32_t>(r.shape.size()));
    for (auto extent : r.shape) w.u64(extent);
    if (shape_numel(r.shape) != r.values.size()) throw FormatError("record '" + r.name + "' size mismatch");
    for (float v : r.values) w.f32(v);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open '" + path + "' for writing");
  out.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
  if (!out) throw FormatError("failed writing '" + path + "'");
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  Reader r(ss.str());
  if (r.bytes(sizeof(kCheckpointMagic)) != std::string(kCheckpointMagic, sizeof(kCheckpointMagic))) {
    throw FormatError("'" + path + "' is not a checkpoint (bad magic)");
  }
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  std::istringstream header(r.str());
  std::string line, model_text;
  while (std::getline(header, line)) {
    if (line.rfind("meta.", 0) == 0) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw FormatError("malformed metadata line '" + line + "'");
      ckpt.metadata[line.substr(5, eq - 5)] = line.substr(eq + 1);
    } else {
      model_text += line + "\n";
    }
  }
  ckpt.config = UNetConfig::from_text(model_text);
  const auto count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    Checkpoint::Record rec;
    rec.name = r.str();
    const auto rank = r.u32();
    if (rank > 8) throw FormatError("record '" + rec.name + "' has implausible rank");
    std::uint64_t total = 1;
    for (std::uint32_t a = 0; a < rank; ++a) {
      const auto extent = r.u64();
      if (extent == 0 || extent > (1ULL << 32) || total > (1ULL << 40) / extent) {
        throw FormatError("record '" + rec.name + "' has an invalid extent");
      }
      total *= extent;
      rec.shape.push_back(static_cast<std::size_t>(extent));
    }
    rec.values.resize(total);
    for (auto& v : rec.values) v = r.f32();
    ckpt.records.push_back(std::move(rec));
  }
  if (!r.at_end()) throw FormatError("trailing bytes after the last checkpoint record");
  return ckpt;
}

void apply_checkpoint(const Checkpoint& ckpt, UNetModel<float>& model) {
  std::map<std::string, Tensor<float>> targets;
  for (auto& p : model.parameters()) targets[p.name] = p.tensor;
  for (auto& b : model.buffers()) targets[b.name] = b.tensor;
  if (targets.size() != ckpt.records.size()) {
    throw FormatError("checkpoint holds " + std::to_string(ckpt.records.size()) + " records, model expects " +
                      std::to_string(targets.size()));
  }
  for (const auto& rec : ckpt.records) {
    auto it = targets.find(rec.name);
    if (it == targets.end()) throw FormatError("checkpoint record '" + rec.name + "' has no model counterpart");
    if (it->second.shape() != rec.shape) {
      throw FormatError("record '" + rec.name + "' shape " + shape_to_string(rec.shape) + " vs model " +
                        shape_to_string(it->second.shape()));
    }
    auto dst = it->second.mutable_data();
    std::memcpy(dst.data(), rec.values.data(), rec.values.size() * sizeof(float));
  }
}

UNetModel<float> model_from_checkpoint(const Checkpoint& ckpt) {
  auto model = UNetModel<float>::build(ckpt.config, 0);
  apply_checkpoint(ckpt, model);
  return model;
}

}  // namespace msamseg
