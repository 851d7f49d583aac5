#include "reffil/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace reffil {

namespace {

constexpr char kMagic[8] = {'R', 'F', 'L', 'C', 'K', 'P', 'T', '1'};

template <typename T>
void write_pod(std::ofstream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw std::runtime_error("truncated checkpoint file");
  return value;
}

}  // namespace

void save_checkpoint(const ModelParams& params, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  out.write(kMagic, sizeof(kMagic));
  write_pod<uint64_t>(out, params.key_init_seed);

  uint64_t n_entries = 0;
  params.for_each_tensor([&](const TensorInfo&, const auto&) { ++n_entries; });
  write_pod<uint64_t>(out, n_entries);

  params.for_each_tensor([&](const TensorInfo& info, const auto& tensor) {
    write_pod<uint32_t>(out, static_cast<uint32_t>(info.name.size()));
    out.write(info.name.data(), static_cast<std::streamsize>(info.name.size()));
    write_pod<uint64_t>(out, static_cast<uint64_t>(tensor.rows()));
    write_pod<uint64_t>(out, static_cast<uint64_t>(tensor.cols()));
    out.write(reinterpret_cast<const char*>(tensor.data()),
              static_cast<std::streamsize>(sizeof(double) * tensor.size()));
  });
  if (!out) throw std::runtime_error("failed writing checkpoint: " + path);
}

ModelParams load_checkpoint(const std::string& path, const ModelConfig& cfg) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("not a checkpoint file: " + path);

  ModelParams params = ModelParams::init(cfg, 0);
  params.key_init_seed = read_pod<uint64_t>(in);
  uint64_t n_entries = read_pod<uint64_t>(in);

  // Pre-create task-key slots by scanning entry names as they stream in.
  for (uint64_t e = 0; e < n_entries; ++e) {
    uint32_t name_len = read_pod<uint32_t>(in);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    uint64_t rows = read_pod<uint64_t>(in);
    uint64_t cols = read_pod<uint64_t>(in);
    if (!in) throw std::runtime_error("truncated checkpoint file");

    constexpr const char* kKeyPrefix = "cdap.key.";
    if (name.rfind(kKeyPrefix, 0) == 0) {
      int task_id = std::stoi(name.substr(std::strlen(kKeyPrefix)));
      params.task_keys[task_id] = Vec::Zero(static_cast<Eigen::Index>(rows));
    }

    bool matched = false;
    params.for_each_tensor([&](const TensorInfo& info, auto& tensor) {
      if (info.name != name) return;
      if (static_cast<uint64_t>(tensor.rows()) != rows ||
          static_cast<uint64_t>(tensor.cols()) != cols)
        throw std::runtime_error("checkpoint shape mismatch for tensor " + name);
      in.read(reinterpret_cast<char*>(tensor.data()),
              static_cast<std::streamsize>(sizeof(double) * tensor.size()));
      matched = true;
    });
    if (!matched) throw std::runtime_error("checkpoint tensor not in manifest: " + name);
    if (!in) throw std::runtime_error("truncated checkpoint file");
  }
  return params;
}

}  // namespace reffil
