#include "tlab/model.hpp"

#include "tlab/rng.hpp"

#include <cmath>
#include <sstream>

namespace tlab {

namespace {

int conv_out(int extent) { return (extent + 2 - 3) / 2 + 1; }  // 3x3, stride 2, pad 1

std::vector<int> used_channels(const ArchSpec& a) {
  if (int(a.channels.size()) < a.depth)
    throw ConfigError("arch '" + a.describe() + "': " + std::to_string(a.channels.size()) +
                      " channel entries for depth " + std::to_string(a.depth));
  return {a.channels.begin(), a.channels.begin() + a.depth};
}

long flat_after_convs(const ArchSpec& a) {
  int h = a.input_shape[1], w = a.input_shape[2];
  for (int l = 0; l < a.depth; ++l) {
    h = conv_out(h);
    w = conv_out(w);
  }
  return long(used_channels(a).back()) * h * w;
}

Tensor init_tensor(Shape shape, long fan_in, Prng g, const std::string& name) {
  double bound = 1.0 / std::sqrt(double(fan_in));
  Array v(numel(shape));
  for (long i = 0; i < long(v.size()); ++i) v[i] = g.uniform(-bound, bound);
  return Tensor::from(v, std::move(shape), true, name);
}

}  // namespace

std::string ArchSpec::describe() const {
  std::ostringstream os;
  switch (family) {
    case ModelFamily::linear:
      os << "linear";
      break;
    case ModelFamily::mlp:
      os << "mlp-d" << depth << "-h" << hidden;
      break;
    case ModelFamily::cnn: {
      os << "cnn-d" << depth << "-c";
      auto ch = channels;
      for (int l = 0; l < depth; ++l) os << (l ? "." : "") << ch[size_t(l)];
      break;
    }
  }
  return os.str();
}

ArchSpec parse_arch(const std::string& id, Shape input_shape, int num_classes, bool bias) {
  ArchSpec a;
  a.input_shape = std::move(input_shape);
  a.num_classes = num_classes;
  a.bias = bias;
  std::vector<std::string> parts;
  std::string cur;
  for (char c : id) {
    if (c == '-') {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  parts.push_back(cur);
  const std::string& fam = parts[0];
  if (fam == "linear")
    a.family = ModelFamily::linear;
  else if (fam == "mlp")
    a.family = ModelFamily::mlp;
  else if (fam == "cnn")
    a.family = ModelFamily::cnn;
  else
    throw ConfigError("unknown architecture family in '" + id + "'");
  for (size_t i = 1; i < parts.size(); ++i) {
    const std::string& p = parts[i];
    if (p.empty()) throw ConfigError("empty component in arch id '" + id + "'");
    try {
      if (p[0] == 'd') {
        a.depth = std::stoi(p.substr(1));
      } else if (p[0] == 'h') {
        a.hidden = std::stoi(p.substr(1));
      } else if (p[0] == 'c') {
        a.channels.clear();
        std::string num;
        for (char c : p.substr(1) + ".") {
          if (c == '.') {
            a.channels.push_back(std::stoi(num));
            num.clear();
          } else {
            num += c;
          }
        }
      } else {
        throw ConfigError("unknown component '" + p + "' in arch id '" + id + "'");
      }
    } catch (const std::invalid_argument&) {
      throw ConfigError("malformed component '" + p + "' in arch id '" + id + "'");
    }
  }
  if (a.family == ModelFamily::linear) a.depth = 0;
  if (a.depth < 0 || (a.family != ModelFamily::linear && a.depth < 1))
    throw ConfigError("arch '" + id + "': depth must be >= 1");
  if (a.family == ModelFamily::mlp && a.hidden < 1)
    throw ConfigError("arch '" + id + "': hidden width must be >= 1");
  if (a.family == ModelFamily::cnn) (void)used_channels(a);  // validates
  return a;
}

long param_count(const ArchSpec& arch) {
  long total = 0;
  long d = numel(arch.input_shape);
  switch (arch.family) {
    case ModelFamily::linear:
      total = d * arch.num_classes + (arch.bias ? arch.num_classes : 0);
      break;
    case ModelFamily::mlp: {
      long in = d;
      for (int l = 0; l < arch.depth; ++l) {
        total += in * arch.hidden + (arch.bias ? arch.hidden : 0);
        in = arch.hidden;
      }
      total += in * arch.num_classes + (arch.bias ? arch.num_classes : 0);
      break;
    }
    case ModelFamily::cnn: {
      auto ch = used_channels(arch);
      long in_c = arch.input_shape[0];
      for (int l = 0; l < arch.depth; ++l) {
        total += long(ch[size_t(l)]) * in_c * 9 + (arch.bias ? ch[size_t(l)] : 0);
        in_c = ch[size_t(l)];
      }
      total += flat_after_convs(arch) * arch.num_classes + (arch.bias ? arch.num_classes : 0);
      break;
    }
  }
  return total;
}

ModelRecord init_model(const ArchSpec& arch, uint64_t seed) {
  ModelRecord m;
  m.arch = arch;
  m.meta.seed = seed;
  Prng root(seed, "model-init");
  auto push = [&](const std::string& name, ParamRole role, Shape shape, long fan_in) {
    m.params.push_back({name, role, init_tensor(std::move(shape), fan_in, root.fork(name), name)});
  };
  long d = numel(arch.input_shape);
  switch (arch.family) {
    case ModelFamily::linear:
      push("head.w", ParamRole::weight, {int(d), arch.num_classes}, d);
      if (arch.bias) push("head.b", ParamRole::bias, {arch.num_classes}, d);
      break;
    case ModelFamily::mlp: {
      long in = d;
      for (int l = 0; l < arch.depth; ++l) {
        std::string base = "fc" + std::to_string(l + 1);
        push(base + ".w", ParamRole::weight, {int(in), arch.hidden}, in);
        if (arch.bias) push(base + ".b", ParamRole::bias, {arch.hidden}, in);
        in = arch.hidden;
      }
      push("head.w", ParamRole::weight, {int(in), arch.num_classes}, in);
      if (arch.bias) push("head.b", ParamRole::bias, {arch.num_classes}, in);
      break;
    }
    case ModelFamily::cnn: {
      auto ch = used_channels(arch);
      int in_c = arch.input_shape[0];
      for (int l = 0; l < arch.depth; ++l) {
        std::string base = "conv" + std::to_string(l + 1);
        long fan = long(in_c) * 9;
        push(base + ".w", ParamRole::weight, {ch[size_t(l)], in_c, 3, 3}, fan);
        if (arch.bias) push(base + ".b", ParamRole::bias, {ch[size_t(l)]}, fan);
        in_c = ch[size_t(l)];
      }
      long flat = flat_after_convs(arch);
      push("head.w", ParamRole::weight, {int(flat), arch.num_classes}, flat);
      if (arch.bias) push("head.b", ParamRole::bias, {arch.num_classes}, flat);
      break;
    }
  }
  m.provenance = provenance_hash(m.arch, m.meta);
  return m;
}

Tensor build_logits(const ModelRecord& model, const Tensor& input) {
  const ArchSpec& a = model.arch;
  long d = numel(a.input_shape);
  if (input.rank() != 2 || input.shape()[1] != d)
    throw ShapeError("build_logits: input " + shape_str(input.shape()) + " does not match " +
                     shape_str(a.input_shape) + " flattened");
  auto find = [&](const std::string& name) -> const Tensor& {
    for (const Param& p : model.params)
      if (p.name == name) return p.tensor;
    throw ConfigError("model missing parameter '" + name + "'");
  };
  long B = input.shape()[0];
  Tensor h = input;
  switch (a.family) {
    case ModelFamily::linear:
      break;
    case ModelFamily::mlp: {
      for (int l = 0; l < a.depth; ++l) {
        std::string base = "fc" + std::to_string(l + 1);
        Tensor z = matmul(h, find(base + ".w"));
        if (a.bias) z = add(z, find(base + ".b"));
        h = relu(z);
      }
      break;
    }
    case ModelFamily::cnn: {
      Tensor r = reshape(h, {int(B), a.input_shape[0], a.input_shape[1], a.input_shape[2]});
      for (int l = 0; l < a.depth; ++l) {
        std::string base = "conv" + std::to_string(l + 1);
        Tensor z = conv2d(r, find(base + ".w"), 2, 1);
        if (a.bias) z = add(z, find(base + ".b"));
        r = relu(z);
      }
      h = reshape(r, {int(B), int(flat_after_convs(a))});
      break;
    }
  }
  Tensor logits = matmul(h, find("head.w"));
  if (a.bias) logits = add(logits, find("head.b"));
  return logits;
}

uint64_t provenance_hash(const ArchSpec& arch, const TrainMeta& meta) {
  std::ostringstream os;
  os << arch.describe() << '|' << shape_str(arch.input_shape) << '|' << arch.num_classes << '|'
     << (arch.bias ? 1 : 0) << '|' << meta.weight_decay << '|' << meta.transform << '|'
     << (meta.max_norm ? std::to_string(*meta.max_norm) : "none") << '|' << meta.seed;
  return fnv1a64(os.str());
}

void set_trainable(ModelRecord& model, bool trainable) {
  for (Param& p : model.params) {
    p.tensor.node()->requires_grad = trainable;
    p.tensor.node()->needs_grad = trainable;
  }
}

std::vector<TensorNormInfo> norm_summary(const ModelRecord& model) {
  std::vector<TensorNormInfo> out;
  for (const Param& p : model.params) {
    if (p.role != ParamRole::weight) continue;
    TensorNormInfo info;
    info.name = p.name;
    const Array& v = p.tensor.values();
    info.frobenius = std::sqrt((v * v).sum());
    const Shape& s = p.tensor.shape();
    if (s.size() == 2) {
      // columns are per-output-unit incoming vectors
      MapCRMat W(v.data(), s[0], s[1]);
      info.max_unit = W.colwise().norm().maxCoeff();
    } else {
      // conv [Co, Ci, kh, kw]: rows of the flattened [Co, Ci*kh*kw] view
      long co = s[0], rest = numel(s) / s[0];
      MapCRMat W(v.data(), co, rest);
      info.max_unit = W.rowwise().norm().maxCoeff();
    }
    out.push_back(info);
  }
  return out;
}

}  // namespace tlab
