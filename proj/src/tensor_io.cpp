#include "amir/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

#include "amir/errors.hpp"

namespace amir {

static_assert(std::endian::native == std::endian::little,
              "blob I/O writes native byte order and assumes a little-endian host");

void write_blob(const std::filesystem::path& path, const torch::Tensor& tensor) {
  auto t = tensor.detach().to(torch::kCPU, torch::kFloat32).contiguous();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw_data("cannot open " + path.string() + " for writing");

  const auto rank = static_cast<std::uint32_t>(t.dim());
  const auto numel = static_cast<std::uint64_t>(t.numel());
  out.write(kBlobMagic, 4);
  out.write(reinterpret_cast<const char*>(&rank), sizeof(rank));
  out.write(reinterpret_cast<const char*>(&numel), sizeof(numel));
  for (auto d : t.sizes()) {
    const auto dim = static_cast<std::int64_t>(d);
    out.write(reinterpret_cast<const char*>(&dim), sizeof(dim));
  }
  out.write(reinterpret_cast<const char*>(t.data_ptr<float>()),
            static_cast<std::streamsize>(numel * sizeof(float)));
  if (!out) throw_data("short write to " + path.string());
}

torch::Tensor read_blob(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw_data("cannot open " + path.string());

  char magic[4];
  std::uint32_t rank = 0;
  std::uint64_t numel = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&rank), sizeof(rank));
  in.read(reinterpret_cast<char*>(&numel), sizeof(numel));
  if (!in || std::memcmp(magic, kBlobMagic, 4) != 0) throw_data(path.string() + " is not a tensor blob");
  if (rank > 8) throw_data(path.string() + ": implausible rank " + std::to_string(rank));

  std::vector<std::int64_t> dims(rank);
  std::uint64_t product = 1;
  for (auto& d : dims) {
    in.read(reinterpret_cast<char*>(&d), sizeof(d));
    if (d < 0) throw_data(path.string() + ": negative dimension");
    product *= static_cast<std::uint64_t>(d);
  }
  if (!in || product != numel) throw_data(path.string() + ": header dims disagree with element count");

  auto t = torch::empty(dims, torch::kFloat32);
  in.read(reinterpret_cast<char*>(t.data_ptr<float>()), static_cast<std::streamsize>(numel * sizeof(float)));
  if (!in) throw_data(path.string() + ": truncated payload");
  return t;
}

}  // namespace amir
