// SPDX-License-Identifier: Apache-2.0
#include "plgdf/volume.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "plgdf/errors.hpp"

namespace plgdf {

namespace fs = std::filesystem;

std::string role_name(VolumeRole role) {
  switch (role) {
    case VolumeRole::image: return "image";
    case VolumeRole::label: return "label";
    case VolumeRole::probability: return "probability";
  }
  return "image";
}

VolumeRole role_from_name(const std::string& name) {
  if (name == "image") return VolumeRole::image;
  if (name == "label") return VolumeRole::label;
  if (name == "probability") return VolumeRole::probability;
  throw std::invalid_argument("unknown volume role: " + name);
}

std::array<std::int64_t, 3> Volume::dims_xyz() const {
  const auto n = values.dim();
  TORCH_CHECK(n == 3 || n == 4, "volume tensor must be (Z,Y,X) or (C,Z,Y,X)");
  return {values.size(n - 1), values.size(n - 2), values.size(n - 3)};
}

bool Volume::is_isotropic(double tol) const {
  return std::abs(spacing[0] - spacing[1]) <= tol &&
         std::abs(spacing[1] - spacing[2]) <= tol;
}

void validate_volume(const Volume& v) {
  for (double s : v.spacing) {
    if (!(s > 0.0)) throw std::invalid_argument("volume spacing must be strictly positive");
  }
  if (v.role == VolumeRole::probability) {
    if (v.values.dim() != 4)
      throw std::invalid_argument("probability volume must be (C,Z,Y,X)");
    if (v.values.size(0) != v.class_count)
      throw std::invalid_argument("probability channel count != class_count");
  } else if (v.values.dim() != 3) {
    throw std::invalid_argument(role_name(v.role) + " volume must be (Z,Y,X)");
  }
  if (v.role == VolumeRole::label) {
    auto vals = v.values.to(torch::kDouble);
    if (!torch::all(vals == vals.round()).item<bool>())
      throw std::invalid_argument("label volume has non-integer values");
    const double lo = vals.min().item<double>();
    const double hi = vals.max().item<double>();
    if (lo < 0 || hi > static_cast<double>(v.class_count - 1))
      throw std::invalid_argument("label values outside [0, class_count-1]");
  } else if (v.role == VolumeRole::probability) {
    const double lo = v.values.min().item<double>();
    const double hi = v.values.max().item<double>();
    if (lo < 0.0 || hi > 1.0)
      throw std::invalid_argument("probability values outside [0,1]");
    auto sums = v.values.sum(0);
    const double err = (sums - 1.0).abs().max().item<double>();
    if (err > 1e-5)
      throw std::invalid_argument("probability channels do not sum to 1 (max err " +
                                  std::to_string(err) + ")");
  }
}

Volume make_image(torch::Tensor values_zyx, std::array<double, 3> spacing) {
  Volume v{std::move(values_zyx), spacing, VolumeRole::image, 2};
  return v;
}

Volume make_label(torch::Tensor values_zyx, std::int64_t class_count,
                  std::array<double, 3> spacing) {
  Volume v{std::move(values_zyx), spacing, VolumeRole::label, class_count};
  return v;
}

Volume make_probability(torch::Tensor values_czyx, std::array<double, 3> spacing) {
  Volume v{std::move(values_czyx), spacing, VolumeRole::probability, 2};
  v.class_count = v.values.size(0);
  return v;
}

namespace {

fs::path raw_path_for(const fs::path& header_path) {
  fs::path p = header_path;
  p.replace_extension(".raw");
  return p;
}

std::map<std::string, std::string> read_header_fields(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open volume header: " + path.string());
  std::map<std::string, std::string> fields;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    auto colon = line.find(':');
    if (colon == std::string::npos)
      throw std::runtime_error("malformed header line in " + path.string() + ": " + line);
    std::string key = line.substr(0, colon);
    std::string value = line.substr(colon + 1);
    auto trim = [](std::string& s) {
      s.erase(0, s.find_first_not_of(" \t"));
      s.erase(s.find_last_not_of(" \t\r") + 1);
    };
    trim(key);
    trim(value);
    fields[key] = value;
  }
  return fields;
}

}  // namespace

void save_volume(const Volume& v, const fs::path& header_path) {
  validate_volume(v);
  const auto dims = v.dims_xyz();
  const bool is_label = v.role == VolumeRole::label;

  std::ofstream hdr(header_path);
  if (!hdr) throw std::runtime_error("cannot write volume header: " + header_path.string());
  hdr << "dims: " << dims[0] << " " << dims[1] << " " << dims[2] << "\n";
  hdr << "spacing_mm: " << v.spacing[0] << " " << v.spacing[1] << " " << v.spacing[2] << "\n";
  hdr << "dtype: " << (is_label ? "uint8" : "float32") << "\n";
  hdr << "role: " << role_name(v.role) << "\n";
  hdr << "class_count: " << v.class_count << "\n";
  hdr.close();

  torch::Tensor flat = is_label ? v.values.to(torch::kUInt8).contiguous()
                                : v.values.to(torch::kFloat32).contiguous();
  std::ofstream raw(raw_path_for(header_path), std::ios::binary);
  if (!raw) throw std::runtime_error("cannot write raw volume: " + header_path.string());
  raw.write(static_cast<const char*>(flat.data_ptr()),
            flat.numel() * flat.element_size());
}

Volume load_volume(const fs::path& header_path) {
  auto fields = read_header_fields(header_path);
  for (const char* req : {"dims", "spacing_mm", "dtype", "role", "class_count"}) {
    if (!fields.count(req))
      throw std::runtime_error("volume header missing field '" + std::string(req) +
                               "': " + header_path.string());
  }
  std::array<std::int64_t, 3> dims{};
  {
    std::istringstream ss(fields["dims"]);
    if (!(ss >> dims[0] >> dims[1] >> dims[2]) || dims[0] <= 0 || dims[1] <= 0 || dims[2] <= 0)
      throw std::runtime_error("bad dims in " + header_path.string());
  }
  std::array<double, 3> spacing{};
  {
    std::istringstream ss(fields["spacing_mm"]);
    if (!(ss >> spacing[0] >> spacing[1] >> spacing[2]))
      throw std::runtime_error("bad spacing_mm in " + header_path.string());
  }
  const VolumeRole role = role_from_name(fields["role"]);
  const std::int64_t class_count = std::stoll(fields["class_count"]);
  const std::string dtype = fields["dtype"];
  if (dtype != "uint8" && dtype != "float32")
    throw std::runtime_error("unsupported dtype '" + dtype + "' in " + header_path.string());

  std::int64_t numel = dims[0] * dims[1] * dims[2];
  std::vector<std::int64_t> shape{dims[2], dims[1], dims[0]};  // (Z,Y,X)
  if (role == VolumeRole::probability) {
    numel *= class_count;
    shape.insert(shape.begin(), class_count);
  }

  std::ifstream raw(raw_path_for(header_path), std::ios::binary);
  if (!raw) throw std::runtime_error("cannot open raw volume for " + header_path.string());
  torch::Tensor values;
  if (dtype == "uint8") {
    values = torch::empty(shape, torch::kUInt8);
    raw.read(static_cast<char*>(values.data_ptr()), numel);
  } else {
    values = torch::empty(shape, torch::kFloat32);
    raw.read(static_cast<char*>(values.data_ptr()), numel * 4);
  }
  if (raw.gcount() != static_cast<std::streamsize>(numel * (dtype == "uint8" ? 1 : 4)))
    throw std::runtime_error("raw volume truncated for " + header_path.string());

  Volume v;
  v.spacing = spacing;
  v.role = role;
  v.class_count = class_count;
  v.values = role == VolumeRole::label ? values.to(torch::kLong) : values;
  validate_volume(v);
  return v;
}

void DatasetManifest::validate() const {
  if (labeled_entries.empty())
    throw ConfigError("manifest has no labeled entries");
  if (class_count < 2)
    throw ConfigError("manifest class_count must be >= 2");
  std::set<std::string> labeled_imgs;
  for (const auto& e : labeled_entries) labeled_imgs.insert(e.image.string());
  for (const auto& u : unlabeled_entries) {
    if (labeled_imgs.count(u.string()))
      throw ConfigError("path appears in both labeled and unlabeled lists: " + u.string());
  }
}

DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open manifest: " + path.string());
  DatasetManifest m;
  const fs::path base = path.parent_path();
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::string kind;
    ss >> kind;
    if (kind == "class_count:") {
      ss >> m.class_count;
    } else if (kind == "labeled:") {
      std::string img, lbl;
      if (!(ss >> img >> lbl))
        throw ConfigError("manifest line " + std::to_string(lineno) +
                          ": labeled entry needs image and label paths");
      m.labeled_entries.push_back({base / img, base / lbl});
    } else if (kind == "unlabeled:") {
      std::string img;
      if (!(ss >> img))
        throw ConfigError("manifest line " + std::to_string(lineno) +
                          ": unlabeled entry needs an image path");
      m.unlabeled_entries.push_back(base / img);
    } else {
      throw ConfigError("manifest line " + std::to_string(lineno) +
                        ": unknown record '" + kind + "'");
    }
  }
  m.validate();
  return m;
}

void save_manifest(const DatasetManifest& m, const fs::path& path) {
  const fs::path base = path.parent_path();
  auto rel = [&](const fs::path& p) {
    std::error_code ec;
    fs::path r = fs::relative(p, base, ec);
    return (ec || r.empty()) ? p : r;
  };
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write manifest: " + path.string());
  out << "class_count: " << m.class_count << "\n";
  for (const auto& e : m.labeled_entries)
    out << "labeled: " << rel(e.image).generic_string() << " "
        << rel(e.label).generic_string() << "\n";
  for (const auto& u : m.unlabeled_entries)
    out << "unlabeled: " << rel(u).generic_string() << "\n";
}

std::pair<DatasetManifest, DatasetManifest> split_manifest(
    const DatasetManifest& all_labeled, std::int64_t labeled, std::int64_t holdout) {
  const auto n = static_cast<std::int64_t>(all_labeled.labeled_entries.size());
  if (labeled < 1 || holdout < 0 || labeled + holdout > n)
    throw ConfigError("split_manifest: need 1 <= labeled and labeled + holdout <= " +
                      std::to_string(n));
  DatasetManifest train, eval;
  train.class_count = eval.class_count = all_labeled.class_count;
  for (std::int64_t i = 0; i < labeled; ++i)
    train.labeled_entries.push_back(all_labeled.labeled_entries[i]);
  for (std::int64_t i = labeled; i < n - holdout; ++i)
    train.unlabeled_entries.push_back(all_labeled.labeled_entries[i].image);
  for (std::int64_t i = n - holdout; i < n; ++i)
    eval.labeled_entries.push_back(all_labeled.labeled_entries[i]);
  train.validate();
  if (holdout > 0) eval.validate();
  return {train, eval};
}

}  // namespace plgdf
