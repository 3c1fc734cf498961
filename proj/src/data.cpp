#include "bvit/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

namespace bvit {

namespace {

std::string with_commas(std::size_t v) {
  std::string digits = std::to_string(v);
  std::string out;
  const std::size_t n = digits.size();
  for (std::size_t i = 0; i < n; ++i) {
    if (i && (n - i) % 3 == 0) out.push_back(',');
    out.push_back(digits[i]);
  }
  return out;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open dataset file " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

Cifar100Record parse_cifar100_record(std::span<const std::uint8_t> bytes) {
  if (bytes.size() != kCifarRecordBytes)
    throw DataError("CIFAR-100 record must be 3074 bytes, got " + std::to_string(bytes.size()));
  Cifar100Record r{bytes[0], bytes[1], bytes.subspan(2)};
  if (r.coarse_label >= 20) throw DataError("CIFAR-100 coarse label " + std::to_string(r.coarse_label) + " >= 20");
  if (r.fine_label >= 100) throw DataError("CIFAR-100 fine label " + std::to_string(r.fine_label) + " >= 100");
  return r;
}

Dataset decode_cifar100(std::span<const std::uint8_t> bytes, std::size_t expected_records, bool standardize,
                        const std::string& what) {
  if (expected_records && bytes.size() != expected_records * kCifarRecordBytes)
    throw DataError(what + ": expected " + with_commas(expected_records * kCifarRecordBytes) + " bytes, got " +
                    with_commas(bytes.size()) + " bytes");
  if (bytes.size() % kCifarRecordBytes != 0)
    throw DataError(what + ": size " + with_commas(bytes.size()) + " is not a multiple of 3074");
  const std::size_t n = bytes.size() / kCifarRecordBytes;
  Dataset ds;
  ds.classes = 100;
  ds.labels.resize(n);
  ds.pixels.resize(n * ds.image_floats());
  for (std::size_t i = 0; i < n; ++i) {
    const Cifar100Record r = parse_cifar100_record(bytes.subspan(i * kCifarRecordBytes, kCifarRecordBytes));
    ds.labels[i] = r.fine_label;
    float* dst = ds.pixels.data() + i * ds.image_floats();
    for (std::size_t k = 0; k < r.pixels.size(); ++k) dst[k] = static_cast<float>(r.pixels[k]) / 255.0f;
  }
  if (standardize) standardize_channels(ds, ds);
  return ds;
}

DatasetSplit load_cifar100(const std::filesystem::path& dir, bool standardize) {
  const auto train_path = dir / "train.bin";
  const auto test_path = dir / "test.bin";
  DatasetSplit split;
  split.train = decode_cifar100(read_file(train_path), kCifarTrainRecords, false, train_path.string());
  split.val = decode_cifar100(read_file(test_path), kCifarTestRecords, false, test_path.string());
  if (standardize) {
    const Dataset reference = split.train;
    standardize_channels(split.train, reference);
    standardize_channels(split.val, reference);
  }
  return split;
}

void standardize_channels(Dataset& ds, const Dataset& reference) {
  const std::size_t plane = reference.height * reference.width;
  for (std::size_t c = 0; c < reference.channels; ++c) {
    double sum = 0, sq = 0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < reference.size(); ++i) {
      const float* p = reference.pixels.data() + i * reference.image_floats() + c * plane;
      for (std::size_t k = 0; k < plane; ++k) {
        sum += p[k];
        sq += static_cast<double>(p[k]) * p[k];
      }
      count += plane;
    }
    const double mean = count ? sum / static_cast<double>(count) : 0.0;
    const double var = count ? sq / static_cast<double>(count) - mean * mean : 1.0;
    const double inv = 1.0 / std::sqrt(std::max(var, 1e-12));
    for (std::size_t i = 0; i < ds.size(); ++i) {
      float* p = ds.pixels.data() + i * ds.image_floats() + c * plane;
      for (std::size_t k = 0; k < plane; ++k) p[k] = static_cast<float>((p[k] - mean) * inv);
    }
  }
}

SyntheticSpec SyntheticSpec::parse(const std::string& text) {
  SyntheticSpec s;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("synthetic spec entry '" + item + "' is not key=value");
    const std::string key = item.substr(0, eq);
    const std::string val = item.substr(eq + 1);
    auto number = [&](auto parse) {
      try {
        return parse(val);
      } catch (const std::exception&) {
        throw std::invalid_argument("bad value for synthetic spec key '" + key + "': " + val);
      }
    };
    auto as_size = [](const std::string& v) { return static_cast<std::size_t>(std::stoull(v)); };
    if (key == "classes") s.classes = number(as_size);
    else if (key == "train") s.train = number(as_size);
    else if (key == "val") s.val = number(as_size);
    else if (key == "seed") s.seed = number(as_size);
    else if (key == "size") s.image_size = number(as_size);
    else if (key == "standardize") s.standardize = number(as_size) != 0;
    else if (key == "noise") s.noise = number([](const std::string& v) { return std::stod(v); });
    else throw std::invalid_argument("unknown synthetic spec key '" + key + "'");
  }
  if (s.classes < 2) throw std::invalid_argument("synthetic spec: classes must be at least 2");
  if (s.train % s.classes || s.val % s.classes)
    throw std::invalid_argument("synthetic spec: train and val sizes must be multiples of classes");
  return s;
}

std::string SyntheticSpec::to_string() const {
  std::ostringstream os;
  os << "classes=" << classes << ",train=" << train << ",val=" << val << ",seed=" << seed << ",size=" << image_size
     << ",noise=" << noise << ",standardize=" << (standardize ? 1 : 0);
  return os.str();
}

namespace {

Dataset synth_split(const SyntheticSpec& spec, std::size_t n, Rng rng) {
  Dataset ds;
  ds.channels = 3;
  ds.height = ds.width = spec.image_size;
  ds.classes = spec.classes;
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) ds.labels[i] = static_cast<int>(i % spec.classes);
  rng.shuffle(ds.labels.begin(), ds.labels.end());
  ds.pixels.resize(n * ds.image_floats());
  const double size = static_cast<double>(spec.image_size);
  for (std::size_t i = 0; i < n; ++i) {
    const double orient = M_PI * ds.labels[i] / static_cast<double>(spec.classes);
    const double freq = rng.uniform(2.0, 4.0);
    const double phase = rng.uniform(0.0, 2.0 * M_PI);
    const double cx = std::cos(orient), sy = std::sin(orient);
    float* img = ds.pixels.data() + i * ds.image_floats();
    for (std::size_t c = 0; c < 3; ++c) {
      const double gain = rng.uniform(0.6, 1.0);
      for (std::size_t y = 0; y < spec.image_size; ++y)
        for (std::size_t x = 0; x < spec.image_size; ++x) {
          const double u = (static_cast<double>(x) * cx + static_cast<double>(y) * sy) / size;
          double v = 0.5 + 0.35 * gain * std::sin(2.0 * M_PI * freq * u + phase) + spec.noise * rng.normal();
          v = std::clamp(v, 0.0, 1.0);
          img[(c * spec.image_size + y) * spec.image_size + x] = static_cast<float>(v);
        }
    }
  }
  return ds;
}

template <typename T>
void augment_impl(Tensor<T>& images, Rng& rng, std::size_t pad) {
  const std::size_t b = images.dim(0), ch = images.dim(1), h = images.dim(2), w = images.dim(3);
  std::vector<T> tmp(ch * h * w);
  for (std::size_t i = 0; i < b; ++i) {
    T* img = images.data() + i * ch * h * w;
    const bool flip = rng.below(2) == 1;
    const auto dy = static_cast<std::ptrdiff_t>(rng.below(2 * pad + 1)) - static_cast<std::ptrdiff_t>(pad);
    const auto dx = static_cast<std::ptrdiff_t>(rng.below(2 * pad + 1)) - static_cast<std::ptrdiff_t>(pad);
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) + dy;
          std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(x) + dx;
          if (flip) sx = static_cast<std::ptrdiff_t>(w) - 1 - sx;
          T v{0};
          if (sy >= 0 && sy < static_cast<std::ptrdiff_t>(h) && sx >= 0 && sx < static_cast<std::ptrdiff_t>(w))
            v = img[(c * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)];
          tmp[(c * h + y) * w + x] = v;
        }
    std::copy(tmp.begin(), tmp.end(), img);
  }
}

}  // namespace

DatasetSplit gen_synthetic(const SyntheticSpec& spec) {
  Rng root(spec.seed);
  DatasetSplit split{synth_split(spec, spec.train, root.split(1)), synth_split(spec, spec.val, root.split(2))};
  if (spec.standardize) {
    const Dataset reference = split.train;
    standardize_channels(split.train, reference);
    standardize_channels(split.val, reference);
  }
  return split;
}

void augment_batch(Tensor<float>& images, Rng& rng, std::size_t pad) { augment_impl(images, rng, pad); }
void augment_batch(Tensor<double>& images, Rng& rng, std::size_t pad) { augment_impl(images, rng, pad); }

}  // namespace bvit
