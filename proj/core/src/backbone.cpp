// SPDX-License-Identifier: Apache-2.0
#include "plgdf/backbone.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "plgdf/rng.hpp"

namespace plgdf {

void BackboneConfig::validate() const {
  if (class_count < 2) throw std::invalid_argument("backbone: class_count must be >= 2");
  if (base_filters < 1) throw std::invalid_argument("backbone: base_filters must be >= 1");
  if (in_channels < 1) throw std::invalid_argument("backbone: in_channels must be >= 1");
  if (head_count < 1) throw std::invalid_argument("backbone: head_count must be >= 1");
  if (depth < 1) throw std::invalid_argument("backbone: depth must be >= 1");
  if (depth < head_count - 1)
    throw std::invalid_argument("backbone: depth must be >= head_count - 1 so each head "
                                "has a distinct decoder scale");
}

namespace {

torch::nn::Sequential conv_block(std::int64_t cin, std::int64_t cout) {
  return torch::nn::Sequential(
      torch::nn::Conv3d(torch::nn::Conv3dOptions(cin, cout, 3).padding(1)),
      torch::nn::InstanceNorm3d(torch::nn::InstanceNorm3dOptions(cout).affine(true)),
      torch::nn::PReLU(torch::nn::PReLUOptions().num_parameters(cout)));
}

torch::nn::Sequential down_block(std::int64_t cin, std::int64_t cout) {
  return torch::nn::Sequential(
      torch::nn::Conv3d(torch::nn::Conv3dOptions(cin, cout, 2).stride(2)),
      torch::nn::InstanceNorm3d(torch::nn::InstanceNorm3dOptions(cout).affine(true)),
      torch::nn::PReLU(torch::nn::PReLUOptions().num_parameters(cout)));
}

torch::nn::Sequential up_block(std::int64_t cin, std::int64_t cout) {
  return torch::nn::Sequential(
      torch::nn::ConvTranspose3d(torch::nn::ConvTranspose3dOptions(cin, cout, 2).stride(2)),
      torch::nn::InstanceNorm3d(torch::nn::InstanceNorm3dOptions(cout).affine(true)),
      torch::nn::PReLU(torch::nn::PReLUOptions().num_parameters(cout)));
}

}  // namespace

MultiScaleVNetImpl::MultiScaleVNetImpl(const BackboneConfig& config) : config_(config) {
  config_.validate();
  std::vector<std::int64_t> f(config_.depth + 1);
  for (std::int64_t i = 0; i <= config_.depth; ++i)
    f[i] = config_.base_filters << i;

  stem_ = register_module("stem", conv_block(config_.in_channels, f[0]));
  for (std::int64_t i = 0; i < config_.depth; ++i) {
    downs_.push_back(register_module("down" + std::to_string(i), down_block(f[i], f[i + 1])));
    encs_.push_back(register_module("enc" + std::to_string(i), conv_block(f[i + 1], f[i + 1])));
    ups_.push_back(register_module("up" + std::to_string(i), up_block(f[i + 1], f[i])));
    decs_.push_back(register_module("dec" + std::to_string(i), conv_block(2 * f[i], f[i])));
  }
  for (std::int64_t k = 0; k < config_.head_count; ++k) {
    const std::int64_t ch = f[std::min(k, config_.depth)];
    heads_.push_back(register_module(
        "head" + std::to_string(k),
        torch::nn::Conv3d(torch::nn::Conv3dOptions(ch, config_.class_count, 1))));
  }
}

void MultiScaleVNetImpl::check_input(const torch::Tensor& patch) const {
  const std::int64_t div = std::int64_t{1} << config_.depth;
  std::ostringstream expect;
  expect << "(N, " << config_.in_channels << ", pz, py, px) with spatial dims divisible by "
         << div;
  if (patch.dim() != 5 || patch.size(1) != config_.in_channels)
    throw std::invalid_argument("backbone input shape mismatch: expected " + expect.str() +
                                ", got " + c10::str(patch.sizes()));
  for (int d = 2; d < 5; ++d)
    if (patch.size(d) % div != 0 || patch.size(d) < div)
      throw std::invalid_argument("backbone input shape mismatch: expected " + expect.str() +
                                  ", got " + c10::str(patch.sizes()));
}

std::vector<torch::Tensor> MultiScaleVNetImpl::decode_features(const torch::Tensor& patch) {
  check_input(patch);
  std::vector<torch::Tensor> skips;
  skips.push_back(stem_->forward(patch));
  torch::Tensor h = skips.back();
  for (std::int64_t i = 0; i < config_.depth; ++i) {
    h = encs_[i]->forward(downs_[i]->forward(h));
    skips.push_back(h);
  }
  std::vector<torch::Tensor> feats(config_.depth + 1);
  feats[config_.depth] = h;  // bottleneck
  for (std::int64_t i = config_.depth - 1; i >= 0; --i) {
    h = decs_[i]->forward(torch::cat({ups_[i]->forward(h), skips[i]}, 1));
    feats[i] = h;
  }
  return feats;
}

torch::Tensor MultiScaleVNetImpl::head_output(std::int64_t k,
                                              const torch::Tensor& feature) {
  torch::Tensor logits = heads_[k]->forward(feature);
  if (k > 0) {
    const double factor = static_cast<double>(std::int64_t{1} << k);
    logits = torch::nn::functional::interpolate(
        logits, torch::nn::functional::InterpolateFuncOptions()
                    .scale_factor(std::vector<double>{factor, factor, factor})
                    .mode(torch::kTrilinear)
                    .align_corners(false));
  }
  return torch::softmax(logits, 1);
}

std::vector<torch::Tensor> MultiScaleVNetImpl::forward_multiscale(const torch::Tensor& patch) {
  auto feats = decode_features(patch);
  std::vector<torch::Tensor> maps;
  maps.reserve(config_.head_count);
  for (std::int64_t k = 0; k < config_.head_count; ++k)
    maps.push_back(head_output(k, feats[std::min(k, config_.depth)]));
  return maps;
}

torch::Tensor MultiScaleVNetImpl::forward_top(const torch::Tensor& patch) {
  auto feats = decode_features(patch);
  return head_output(0, feats[0]);
}

MultiScaleVNet init_params(const BackboneConfig& config, std::uint64_t rng_seed) {
  MultiScaleVNet net(config);
  auto rng = make_rng(rng_seed, RngTag::init);
  std::normal_distribution<double> gauss(0.0, 1.0);
  torch::NoGradGuard guard;
  for (const auto& m : net->modules(/*include_self=*/false)) {
    if (auto* conv = m->as<torch::nn::Conv3d>()) {
      const double std_dev = std::sqrt(2.0 / static_cast<double>(conv->weight[0].numel()));
      auto* data = conv->weight.data_ptr<float>();
      for (std::int64_t i = 0; i < conv->weight.numel(); ++i)
        data[i] = static_cast<float>(std_dev * gauss(rng));
      conv->bias.zero_();
    } else if (auto* tconv = m->as<torch::nn::ConvTranspose3d>()) {
      const double std_dev = std::sqrt(2.0 / static_cast<double>(tconv->weight[0].numel()));
      auto* data = tconv->weight.data_ptr<float>();
      for (std::int64_t i = 0; i < tconv->weight.numel(); ++i)
        data[i] = static_cast<float>(std_dev * gauss(rng));
      tconv->bias.zero_();
    } else if (auto* norm = m->as<torch::nn::InstanceNorm3d>()) {
      norm->weight.fill_(1.0);
      norm->bias.zero_();
    } else if (auto* prelu = m->as<torch::nn::PReLU>()) {
      prelu->weight.fill_(0.25);
    }
  }
  return net;
}

TeacherStudentState make_teacher_student(const BackboneConfig& config,
                                         std::uint64_t rng_seed, double ema_decay) {
  if (ema_decay < 0.0 || ema_decay > 1.0)
    throw std::invalid_argument("ema_decay must be in [0,1]");
  TeacherStudentState state;
  state.student = init_params(config, rng_seed);
  state.teacher = MultiScaleVNet(config);
  state.ema_decay = ema_decay;
  torch::NoGradGuard guard;
  auto sp = state.student->named_parameters();
  auto tp = state.teacher->named_parameters();
  for (const auto& item : sp) tp[item.key()].copy_(item.value());
  for (auto& p : state.teacher->parameters()) p.set_requires_grad(false);
  return state;
}

void ema_update(TeacherStudentState& state) {
  auto sp = state.student->named_parameters();
  auto tp = state.teacher->named_parameters();
  if (sp.size() != tp.size())
    throw std::invalid_argument("ema_update: student/teacher parameter sets differ in size");
  torch::NoGradGuard guard;
  const double a = state.ema_decay;
  for (const auto& item : sp) {
    auto* t = tp.find(item.key());
    if (t == nullptr)
      throw std::invalid_argument("ema_update: teacher missing parameter " + item.key());
    if (!t->sizes().equals(item.value().sizes()))
      throw std::invalid_argument("ema_update: shape mismatch for " + item.key());
    t->mul_(a).add_(item.value(), 1.0 - a);
  }
}

namespace {

constexpr std::int64_t kCheckpointVersion = 1;

torch::Tensor optimizer_bytes(const torch::optim::Optimizer& opt) {
  std::ostringstream stream;
  torch::serialize::OutputArchive ar;
  opt.save(ar);
  ar.save_to(stream);
  const std::string buf = stream.str();
  auto t = torch::empty({static_cast<std::int64_t>(buf.size())}, torch::kUInt8);
  std::memcpy(t.data_ptr(), buf.data(), buf.size());
  return t;
}

void load_optimizer_bytes(const torch::Tensor& bytes, torch::optim::Optimizer& opt) {
  std::string buf(reinterpret_cast<const char*>(bytes.data_ptr()),
                  static_cast<std::size_t>(bytes.numel()));
  std::istringstream stream(buf);
  torch::serialize::InputArchive ar;
  ar.load_from(stream);
  opt.load(ar);
}

}  // namespace

void save_checkpoint(const std::string& path, const TeacherStudentState& state,
                     const torch::optim::Optimizer* optimizer, std::int64_t step,
                     double best_val) {
  torch::serialize::OutputArchive ar;
  const auto& cfg = state.student->config();
  ar.write("format_version", torch::tensor(kCheckpointVersion));
  ar.write("step", torch::tensor(step));
  ar.write("best_val", torch::tensor(best_val, torch::kDouble));
  ar.write("ema_decay", torch::tensor(state.ema_decay, torch::kDouble));
  ar.write("backbone/in_channels", torch::tensor(cfg.in_channels));
  ar.write("backbone/class_count", torch::tensor(cfg.class_count));
  ar.write("backbone/base_filters", torch::tensor(cfg.base_filters));
  ar.write("backbone/depth", torch::tensor(cfg.depth));
  ar.write("backbone/head_count", torch::tensor(cfg.head_count));
  for (const auto& item : state.student->named_parameters())
    ar.write("student/" + item.key(), item.value().detach());
  for (const auto& item : state.teacher->named_parameters())
    ar.write("teacher/" + item.key(), item.value().detach());
  if (optimizer) ar.write("optimizer_bytes", optimizer_bytes(*optimizer));
  ar.save_to(path);
}

namespace {

torch::Tensor read_tensor(torch::serialize::InputArchive& ar, const std::string& key) {
  torch::Tensor t;
  ar.read(key, t);
  return t;
}

Checkpoint read_meta(torch::serialize::InputArchive& ar) {
  Checkpoint ck;
  const auto version = read_tensor(ar, "format_version").item<std::int64_t>();
  if (version != kCheckpointVersion)
    throw std::runtime_error("unsupported checkpoint format_version " + std::to_string(version));
  ck.step = read_tensor(ar, "step").item<std::int64_t>();
  ck.best_val = read_tensor(ar, "best_val").item<double>();
  ck.backbone.in_channels = read_tensor(ar, "backbone/in_channels").item<std::int64_t>();
  ck.backbone.class_count = read_tensor(ar, "backbone/class_count").item<std::int64_t>();
  ck.backbone.base_filters = read_tensor(ar, "backbone/base_filters").item<std::int64_t>();
  ck.backbone.depth = read_tensor(ar, "backbone/depth").item<std::int64_t>();
  ck.backbone.head_count = read_tensor(ar, "backbone/head_count").item<std::int64_t>();
  return ck;
}

}  // namespace

Checkpoint peek_checkpoint(const std::string& path) {
  torch::serialize::InputArchive ar;
  ar.load_from(path);
  return read_meta(ar);
}

Checkpoint load_checkpoint(const std::string& path, TeacherStudentState& state,
                           torch::optim::Optimizer* optimizer) {
  torch::serialize::InputArchive ar;
  ar.load_from(path);
  Checkpoint ck = read_meta(ar);
  torch::NoGradGuard guard;
  for (const auto& item : state.student->named_parameters())
    item.value().copy_(read_tensor(ar, "student/" + item.key()));
  for (const auto& item : state.teacher->named_parameters())
    item.value().copy_(read_tensor(ar, "teacher/" + item.key()));
  state.ema_decay = read_tensor(ar, "ema_decay").item<double>();
  if (optimizer) load_optimizer_bytes(read_tensor(ar, "optimizer_bytes"), *optimizer);
  return ck;
}

}  // namespace plgdf
