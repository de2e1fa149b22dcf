#include "amir/image_io.hpp"

#include <png.h>

#include <cstring>
#include <vector>

#include "amir/errors.hpp"

namespace amir {

torch::Tensor read_png(const std::filesystem::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw_data("cannot read " + path.string() + ": " + image.message);
  }
  // 16-bit sources are read linearly so no gamma conversion touches the values.
  const bool wide = (image.format & PNG_FORMAT_FLAG_LINEAR) != 0;
  image.format = wide ? PNG_FORMAT_LINEAR_Y : PNG_FORMAT_GRAY;
  const auto h = static_cast<std::int64_t>(image.height);
  const auto w = static_cast<std::int64_t>(image.width);

  torch::Tensor out;
  if (wide) {
    std::vector<png_uint_16> buffer(PNG_IMAGE_SIZE(image) / sizeof(png_uint_16));
    if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
      throw_data("cannot decode " + path.string() + ": " + image.message);
    }
    out = torch::empty({h, w}, torch::kFloat32);
    auto dst = out.data_ptr<float>();
    for (std::size_t i = 0; i < buffer.size(); ++i) dst[i] = static_cast<float>(buffer[i]) / 65535.0f;
  } else {
    std::vector<png_byte> buffer(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
      throw_data("cannot decode " + path.string() + ": " + image.message);
    }
    out = torch::from_blob(buffer.data(), {h, w}, torch::kUInt8).to(torch::kFloat32) / 255.0f;
  }
  return out.contiguous();
}

void write_png(const std::filesystem::path& path, const torch::Tensor& image, int bit_depth) {
  if (image.dim() != 2) throw_shape("write_png expects [H, W]");
  if (bit_depth != 8 && bit_depth != 16) throw_parameter("bit depth must be 8 or 16");
  auto t = image.detach().to(torch::kCPU, torch::kFloat32).clamp(0.0, 1.0);

  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(t.size(1));
  png.height = static_cast<png_uint_32>(t.size(0));
  png.format = bit_depth == 16 ? PNG_FORMAT_LINEAR_Y : PNG_FORMAT_GRAY;

  int ok = 0;
  if (bit_depth == 16) {
    auto q = torch::round(t * 65535.0f).to(torch::kInt32).contiguous();
    std::vector<png_uint_16> buffer(static_cast<std::size_t>(q.numel()));
    auto src = q.data_ptr<std::int32_t>();
    for (std::size_t i = 0; i < buffer.size(); ++i) buffer[i] = static_cast<png_uint_16>(src[i]);
    ok = png_image_write_to_file(&png, path.c_str(), 0, buffer.data(), 0, nullptr);
  } else {
    auto q = torch::round(t * 255.0f).to(torch::kUInt8).contiguous();
    ok = png_image_write_to_file(&png, path.c_str(), 0, q.data_ptr<std::uint8_t>(), 0, nullptr);
  }
  if (!ok) throw_data("cannot write " + path.string() + ": " + png.message);
}

}  // namespace amir
