#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "msamseg/unet.hpp"

namespace msamseg {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[8] = {'M', 'S', 'A', 'M', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Layout (all integers little-endian):
///   8 bytes magic "MSAMCKPT", u32 version,
///   u32 length + model config text (UNetConfig::to_text) followed by
///   "meta.<key>=<value>" lines,
///   u32 record count, then per record: u32 name length, name bytes,
///   u32 rank, u64 extents, f32 values.
/// Records cover every parameter and every batch-norm running statistic.
struct Checkpoint {
  struct Record {
    std::string name;
    Shape shape;
    std::vector<float> values;
  };

  UNetConfig config;
  std::map<std::string, std::string> metadata;
  std::vector<Record> records;
};

Checkpoint capture_checkpoint(const UNetModel<float>& model,
                              const std::map<std::string, std::string>& metadata = {});
void write_checkpoint(const std::string& path, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(const std::string& path);

/// Copies every record into the matching parameter/buffer; names and shapes
/// must match exactly.
void apply_checkpoint(const Checkpoint& checkpoint, UNetModel<float>& model);
UNetModel<float> model_from_checkpoint(const Checkpoint& checkpoint);

}  // namespace msamseg
