#include "dit/imaging.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

namespace dit {

Image::Image(std::size_t w, std::size_t h, std::size_t c, float fill)
    : width(w), height(h), channels(c), data(w * h * c, fill) {}

namespace {

std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ImageError("cannot open image " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

Image decode_pgm(const std::vector<unsigned char>& b, const std::string& name) {
  std::size_t pos = 2;
  auto next_int = [&]() -> long {
    for (;;) {
      while (pos < b.size() && std::isspace(b[pos])) ++pos;
      if (pos < b.size() && b[pos] == '#') {
        while (pos < b.size() && b[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    if (pos >= b.size() || !std::isdigit(b[pos])) throw ImageError("malformed PGM header in " + name);
    long v = 0;
    while (pos < b.size() && std::isdigit(b[pos])) v = v * 10 + (b[pos++] - '0');
    return v;
  };
  const long w = next_int();
  const long h = next_int();
  const long maxval = next_int();
  if (w <= 0 || h <= 0) throw ImageError("zero-dimension image in " + name);
  if (maxval <= 0 || maxval > 255) throw ImageError("unsupported PGM maxval in " + name);
  ++pos;  // single whitespace before the raster
  const auto n = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
  if (pos + n > b.size()) throw ImageError("truncated PGM raster in " + name);
  Image img(static_cast<std::size_t>(w), static_cast<std::size_t>(h), 1);
  for (std::size_t i = 0; i < n; ++i) img.data[i] = static_cast<float>(b[pos + i]) * 255.0f / static_cast<float>(maxval);
  return img;
}

Image decode_png(const std::vector<unsigned char>& b, const std::string& name) {
  png_image pi;
  std::memset(&pi, 0, sizeof(pi));
  pi.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&pi, b.data(), b.size()))
    throw ImageError("cannot decode PNG " + name + ": " + pi.message);
  const bool color = (pi.format & PNG_FORMAT_FLAG_COLOR) != 0;
  pi.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (pi.width == 0 || pi.height == 0) {
    png_image_free(&pi);
    throw ImageError("zero-dimension image in " + name);
  }
  std::vector<unsigned char> raw(PNG_IMAGE_SIZE(pi));
  if (!png_image_finish_read(&pi, nullptr, raw.data(), 0, nullptr)) {
    std::string msg = pi.message;
    png_image_free(&pi);
    throw ImageError("cannot decode PNG " + name + ": " + msg);
  }
  Image img(pi.width, pi.height, color ? 3 : 1);
  std::transform(raw.begin(), raw.end(), img.data.begin(), [](unsigned char v) { return static_cast<float>(v); });
  return img;
}

std::vector<unsigned char> to_bytes(const Image& img) {
  std::vector<unsigned char> out(img.data.size());
  std::transform(img.data.begin(), img.data.end(), out.begin(), [](float v) {
    return static_cast<unsigned char>(std::clamp(std::lround(v), 0L, 255L));
  });
  return out;
}

}  // namespace

Image load_image(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  static const unsigned char kPngSig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  if (bytes.size() >= 8 && std::equal(kPngSig, kPngSig + 8, bytes.begin())) return decode_png(bytes, path.string());
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '5') return decode_pgm(bytes, path.string());
  throw ImageError("unsupported or undecodable image format: " + path.string());
}

void save_png(const Image& img, const std::filesystem::path& path) {
  if (img.channels != 1 && img.channels != 3) throw ImageError("save_png: channels must be 1 or 3");
  png_image pi;
  std::memset(&pi, 0, sizeof(pi));
  pi.version = PNG_IMAGE_VERSION;
  pi.width = static_cast<png_uint_32>(img.width);
  pi.height = static_cast<png_uint_32>(img.height);
  pi.format = img.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  const auto bytes = to_bytes(img);
  if (!png_image_write_to_file(&pi, path.string().c_str(), 0, bytes.data(), 0, nullptr))
    throw ImageError("cannot write PNG " + path.string() + ": " + pi.message);
}

void save_pgm(const Image& img, const std::filesystem::path& path) {
  if (img.channels != 1) throw ImageError("save_pgm: image must be grayscale");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ImageError("cannot write " + path.string());
  f << "P5\n" << img.width << ' ' << img.height << "\n255\n";
  const auto bytes = to_bytes(img);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Image resize(const Image& img, std::size_t w, std::size_t h) {
  if (w == 0 || h == 0) throw std::invalid_argument("resize: target dims must be >= 1");
  if (w == img.width && h == img.height) return img;
  Image out(w, h, img.channels);
  const double sx = static_cast<double>(img.width) / static_cast<double>(w);
  const double sy = static_cast<double>(img.height) / static_cast<double>(h);
  std::vector<std::size_t> x0(w), x1(w);
  std::vector<double> fx(w);
  for (std::size_t x = 0; x < w; ++x) {
    const double src = std::max(0.0, (static_cast<double>(x) + 0.5) * sx - 0.5);
    x0[x] = std::min(static_cast<std::size_t>(src), img.width - 1);
    x1[x] = std::min(x0[x] + 1, img.width - 1);
    fx[x] = src - static_cast<double>(x0[x]);
  }
  for (std::size_t y = 0; y < h; ++y) {
    const double src = std::max(0.0, (static_cast<double>(y) + 0.5) * sy - 0.5);
    const std::size_t y0 = std::min(static_cast<std::size_t>(src), img.height - 1);
    const std::size_t y1 = std::min(y0 + 1, img.height - 1);
    const double fy = src - static_cast<double>(y0);
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < img.channels; ++c) {
        const double top = img.at(x0[x], y0, c) * (1.0 - fx[x]) + img.at(x1[x], y0, c) * fx[x];
        const double bot = img.at(x0[x], y1, c) * (1.0 - fx[x]) + img.at(x1[x], y1, c) * fx[x];
        out.at(x, y, c) = static_cast<float>(top * (1.0 - fy) + bot * fy);
      }
  }
  return out;
}

Image crop(const Image& img, const CropRect& r) {
  if (r.w == 0 || r.h == 0 || r.x + r.w > img.width || r.y + r.h > img.height)
    throw std::invalid_argument("crop: rectangle outside image");
  Image out(r.w, r.h, img.channels);
  for (std::size_t y = 0; y < r.h; ++y) {
    const auto* src = img.data.data() + ((r.y + y) * img.width + r.x) * img.channels;
    std::copy_n(src, r.w * img.channels, out.data.data() + y * r.w * img.channels);
  }
  return out;
}

Image pad_to(const Image& img, std::size_t w, std::size_t h, float fill) {
  if (w < img.width || h < img.height) throw std::invalid_argument("pad_to: target smaller than image");
  Image out(w, h, img.channels, fill);
  for (std::size_t y = 0; y < img.height; ++y)
    std::copy_n(img.data.data() + y * img.width * img.channels, img.width * img.channels,
                out.data.data() + y * w * img.channels);
  return out;
}

Image to_channels(const Image& img, std::size_t c) {
  if (img.channels == c) return img;
  Image out(img.width, img.height, c);
  const std::size_t n = img.width * img.height;
  if (img.channels == 1) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < c; ++k) out.data[i * c + k] = img.data[i];
  } else if (c == 1) {
    for (std::size_t i = 0; i < n; ++i) {
      float s = 0.0f;
      for (std::size_t k = 0; k < img.channels; ++k) s += img.data[i * img.channels + k];
      out.data[i] = s / static_cast<float>(img.channels);
    }
  } else {
    throw std::invalid_argument("to_channels: cannot map " + std::to_string(img.channels) + " to " +
                                std::to_string(c) + " channels");
  }
  return out;
}

CropRect sample_resized_crop(Rng& rng, std::size_t width, std::size_t height, const ResizedCropParams& p) {
  if (!(p.area_min > 0.0 && p.area_min <= p.area_max && p.area_max <= 1.0))
    throw std::invalid_argument("random_resized_crop: need 0 < area_min <= area_max <= 1");
  const double area = static_cast<double>(width) * static_cast<double>(height);
  const double log_lo = std::log(p.aspect_min);
  const double log_hi = std::log(p.aspect_max);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * rng.uniform(p.area_min, p.area_max);
    const double aspect = std::exp(rng.uniform(log_lo, log_hi));
    const auto w = static_cast<std::size_t>(std::lround(std::sqrt(target * aspect)));
    const auto h = static_cast<std::size_t>(std::lround(std::sqrt(target / aspect)));
    if (w > 0 && h > 0 && w <= width && h <= height) {
      const auto y = static_cast<std::size_t>(rng.randint(0, static_cast<std::int64_t>(height - h)));
      const auto x = static_cast<std::size_t>(rng.randint(0, static_cast<std::int64_t>(width - w)));
      return {x, y, w, h};
    }
  }
  const double ratio = static_cast<double>(width) / static_cast<double>(height);
  std::size_t w = width, h = height;
  if (ratio < p.aspect_min) {
    h = static_cast<std::size_t>(std::lround(static_cast<double>(w) / p.aspect_min));
  } else if (ratio > p.aspect_max) {
    w = static_cast<std::size_t>(std::lround(static_cast<double>(h) * p.aspect_max));
  }
  w = std::clamp<std::size_t>(w, 1, width);
  h = std::clamp<std::size_t>(h, 1, height);
  return {(width - w) / 2, (height - h) / 2, w, h};
}

Image random_resized_crop(const Image& img, Rng& rng, const ResizedCropParams& p, std::size_t out, CropRect* used) {
  const CropRect r = sample_resized_crop(rng, img.width, img.height, p);
  if (used) *used = r;
  return resize(crop(img, r), out, out);
}

std::pair<std::size_t, std::size_t> multiscale_target_dims(std::size_t w, std::size_t h, std::size_t short_side,
                                                          std::size_t max_long) {
  const double s = static_cast<double>(std::min(w, h));
  const double l = static_cast<double>(std::max(w, h));
  double scale = static_cast<double>(short_side) / s;
  if (l * scale > static_cast<double>(max_long)) scale = static_cast<double>(max_long) / l;
  const auto ow = static_cast<std::size_t>(std::max(1L, std::lround(static_cast<double>(w) * scale)));
  const auto oh = static_cast<std::size_t>(std::max(1L, std::lround(static_cast<double>(h) * scale)));
  return {ow, oh};
}

Image multiscale_resize(const Image& img, Rng& rng, ScaleTransform* tf) {
  CropRect r{0, 0, img.width, img.height};
  if (rng.bernoulli(0.5)) {
    const auto cw = static_cast<std::size_t>(rng.randint(static_cast<std::int64_t>((img.width + 1) / 2),
                                                         static_cast<std::int64_t>(img.width)));
    const auto ch = static_cast<std::size_t>(rng.randint(static_cast<std::int64_t>((img.height + 1) / 2),
                                                         static_cast<std::int64_t>(img.height)));
    r.x = static_cast<std::size_t>(rng.randint(0, static_cast<std::int64_t>(img.width - cw)));
    r.y = static_cast<std::size_t>(rng.randint(0, static_cast<std::int64_t>(img.height - ch)));
    r.w = cw;
    r.h = ch;
  }
  const std::size_t short_side = 480 + 32 * static_cast<std::size_t>(rng.randint(0, 10));
  const auto [ow, oh] = multiscale_target_dims(r.w, r.h, short_side);
  if (tf) {
    tf->crop = r;
    tf->sx = static_cast<double>(ow) / static_cast<double>(r.w);
    tf->sy = static_cast<double>(oh) / static_cast<double>(r.h);
  }
  return resize(crop(img, r), ow, oh);
}

namespace {

std::vector<double> gaussian_kernel(std::size_t window) {
  const double sigma = 0.3 * ((static_cast<double>(window) - 1.0) * 0.5 - 1.0) + 0.8;
  std::vector<double> k(window);
  const double c = (static_cast<double>(window) - 1.0) / 2.0;
  double s = 0.0;
  for (std::size_t i = 0; i < window; ++i) {
    const double d = static_cast<double>(i) - c;
    k[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    s += k[i];
  }
  for (auto& v : k) v /= s;
  return k;
}

}  // namespace

Image adaptive_binarize(const Image& img, std::size_t window, float offset) {
  if (img.channels != 1) throw ImageError("adaptive_binarize: input must be grayscale");
  if (window < 3 || window % 2 == 0) throw std::invalid_argument("adaptive_binarize: window must be odd and >= 3");
  const auto k = gaussian_kernel(window);
  const long r = static_cast<long>(window / 2);
  const long w = static_cast<long>(img.width), h = static_cast<long>(img.height);
  auto clampi = [](long v, long hi) { return std::clamp(v, 0L, hi - 1); };
  std::vector<double> tmp(img.data.size());
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      double s = 0.0;
      for (long d = -r; d <= r; ++d) s += k[static_cast<std::size_t>(d + r)] * img.data[y * w + clampi(x + d, w)];
      tmp[y * w + x] = s;
    }
  Image out(img.width, img.height, 1);
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      double m = 0.0;
      for (long d = -r; d <= r; ++d) m += k[static_cast<std::size_t>(d + r)] * tmp[clampi(y + d, h) * w + x];
      out.data[y * w + x] = img.data[y * w + x] > m - offset ? 255.0f : 0.0f;
    }
  return out;
}

PatchSequence patchify(const Image& img, std::size_t patch) {
  if (patch == 0 || img.width % patch != 0 || img.height % patch != 0)
    throw std::invalid_argument("patchify: image " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                                " not divisible by patch size " + std::to_string(patch));
  PatchSequence seq;
  seq.patch_size = patch;
  seq.grid_h = img.height / patch;
  seq.grid_w = img.width / patch;
  seq.channels = img.channels;
  seq.patches.reserve(seq.grid_h * seq.grid_w);
  const std::size_t row = patch * img.channels;
  for (std::size_t gy = 0; gy < seq.grid_h; ++gy)
    for (std::size_t gx = 0; gx < seq.grid_w; ++gx) {
      std::vector<float> p(patch * row);
      for (std::size_t y = 0; y < patch; ++y)
        std::copy_n(img.data.data() + ((gy * patch + y) * img.width + gx * patch) * img.channels, row,
                    p.data() + y * row);
      seq.patches.push_back(std::move(p));
    }
  return seq;
}

Image unpatchify(const PatchSequence& seq) {
  const std::size_t p = seq.patch_size;
  Image img(seq.grid_w * p, seq.grid_h * p, seq.channels);
  const std::size_t row = p * seq.channels;
  for (std::size_t gy = 0; gy < seq.grid_h; ++gy)
    for (std::size_t gx = 0; gx < seq.grid_w; ++gx) {
      const auto& src = seq.patches[gy * seq.grid_w + gx];
      for (std::size_t y = 0; y < p; ++y)
        std::copy_n(src.data() + y * row, row, img.data.data() + ((gy * p + y) * img.width + gx * p) * seq.channels);
    }
  return img;
}

Image normalize(const Image& img, const std::vector<float>& mean, const std::vector<float>& stdev) {
  if (mean.size() != img.channels || stdev.size() != img.channels)
    throw std::invalid_argument("normalize: need one mean/std per channel");
  for (float s : stdev)
    if (!(s > 0.0f)) throw std::invalid_argument("normalize: std must be > 0");
  Image out = img;
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    const std::size_t c = i % img.channels;
    out.data[i] = (img.data[i] / 255.0f - mean[c]) / stdev[c];
  }
  return out;
}

}  // namespace dit
