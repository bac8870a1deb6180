#include "tlab/serialize.hpp"

#include <json.hpp>

#include <cstring>
#include <filesystem>
#include <fstream>

namespace fs = std::filesystem;
using nlohmann::json;

namespace tlab {

namespace {

constexpr char kMagic[8] = {'T', 'L', 'A', 'B', 'M', 'D', 'L', '1'};

void write_u32le(std::ostream& out, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

void write_f64le(std::ostream& out, const double* data, long count) {
  std::vector<unsigned char> buf(size_t(count) * 8);
  for (long i = 0; i < count; ++i) {
    uint64_t u;
    std::memcpy(&u, data + i, 8);
    for (int k = 0; k < 8; ++k) buf[size_t(i) * 8 + size_t(k)] = static_cast<unsigned char>(u >> (8 * k));
  }
  out.write(reinterpret_cast<const char*>(buf.data()), long(buf.size()));
}

double read_f64le(const unsigned char* p) {
  uint64_t u = 0;
  for (int k = 7; k >= 0; --k) u = (u << 8) | p[k];
  double v;
  std::memcpy(&v, &u, 8);
  return v;
}

json arch_to_json(const ArchSpec& a) {
  return json{{"id", a.describe()},
              {"input_shape", a.input_shape},
              {"num_classes", a.num_classes},
              {"bias", a.bias}};
}

}  // namespace

void save_model(const ModelRecord& model, const std::string& path) {
  json header;
  header["format_version"] = 1;
  header["arch"] = arch_to_json(model.arch);
  header["meta"] = {
      {"weight_decay", model.meta.weight_decay},
      {"transform", model.meta.transform},
      {"max_norm", model.meta.max_norm ? json(*model.meta.max_norm) : json(nullptr)},
      {"seed", model.meta.seed},
  };
  header["clean_accuracy"] = model.clean_accuracy;
  header["epoch_loss"] = model.epoch_loss;
  header["provenance"] = hex64(model.provenance);
  json dir = json::array();
  long offset = 0;
  for (const Param& p : model.params) {
    dir.push_back({{"name", p.name},
                   {"role", p.role == ParamRole::weight ? "weight" : "bias"},
                   {"shape", p.tensor.shape()},
                   {"offset", offset},
                   {"count", p.tensor.size()}});
    offset += p.tensor.size();
  }
  header["tensors"] = dir;
  std::string hs = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(ParseErrc::missing_file, "cannot write " + path);
  out.write(kMagic, 8);
  write_u32le(out, uint32_t(hs.size()));
  out.write(hs.data(), long(hs.size()));
  for (const Param& p : model.params) write_f64le(out, p.tensor.values().data(), p.tensor.size());
}

ModelRecord load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(ParseErrc::missing_file, path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 12) throw DataError(ParseErrc::truncated_file, path + ": no header");
  if (std::memcmp(bytes.data(), kMagic, 8) != 0)
    throw DataError(ParseErrc::bad_magic, path + ": not a model container");
  uint32_t hlen = uint32_t(bytes[8]) | (uint32_t(bytes[9]) << 8) | (uint32_t(bytes[10]) << 16) |
                  (uint32_t(bytes[11]) << 24);
  if (bytes.size() < 12 + size_t(hlen))
    throw DataError(ParseErrc::truncated_file, path + ": header cut short");
  json header;
  try {
    header = json::parse(bytes.begin() + 12, bytes.begin() + 12 + hlen);
  } catch (const json::exception& e) {
    throw DataError(ParseErrc::bad_magic, path + ": unreadable header: " + e.what());
  }
  if (header.value("format_version", -1) != 1)
    throw DataError(ParseErrc::bad_magic, path + ": unsupported container version");

  ModelRecord m;
  const json& aj = header.at("arch");
  m.arch = parse_arch(aj.at("id").get<std::string>(), aj.at("input_shape").get<Shape>(),
                      aj.at("num_classes").get<int>(), aj.at("bias").get<bool>());
  const json& mj = header.at("meta");
  m.meta.weight_decay = mj.at("weight_decay").get<double>();
  m.meta.transform = mj.at("transform").get<std::string>();
  if (!mj.at("max_norm").is_null()) m.meta.max_norm = mj.at("max_norm").get<double>();
  m.meta.seed = mj.at("seed").get<uint64_t>();
  m.clean_accuracy = header.at("clean_accuracy").get<double>();
  m.epoch_loss = header.at("epoch_loss").get<std::vector<double>>();

  size_t data_start = 12 + size_t(hlen);
  long total = 0;
  for (const json& t : header.at("tensors")) total += t.at("count").get<long>();
  size_t want = data_start + size_t(total) * 8;
  if (bytes.size() < want)
    throw DataError(ParseErrc::truncated_file,
                    path + ": tensor data cut short (" + std::to_string(bytes.size()) + " of " +
                        std::to_string(want) + " bytes)");
  if (bytes.size() > want)
    throw DataError(ParseErrc::trailing_bytes,
                    path + ": " + std::to_string(bytes.size() - want) + " extra bytes");
  for (const json& t : header.at("tensors")) {
    Param p;
    p.name = t.at("name").get<std::string>();
    p.role = t.at("role").get<std::string>() == "weight" ? ParamRole::weight : ParamRole::bias;
    Shape shape = t.at("shape").get<Shape>();
    long count = t.at("count").get<long>();
    long offset = t.at("offset").get<long>();
    if (numel(shape) != count)
      throw DataError(ParseErrc::count_mismatch,
                      path + ": tensor '" + p.name + "' count disagrees with shape");
    Array v(count);
    const unsigned char* base = bytes.data() + data_start + size_t(offset) * 8;
    for (long i = 0; i < count; ++i) v[i] = read_f64le(base + size_t(i) * 8);
    p.tensor = Tensor::from(v, std::move(shape), false, p.name);
    m.params.push_back(std::move(p));
  }
  m.provenance = provenance_hash(m.arch, m.meta);
  std::string stored = header.at("provenance").get<std::string>();
  if (stored != hex64(m.provenance))
    throw DataError(ParseErrc::provenance_mismatch,
                    path + ": stored " + stored + ", recomputed " + hex64(m.provenance));
  return m;
}

void save_zoo(const Zoo& zoo, const std::string& dir) {
  fs::create_directories(dir);
  json manifest;
  manifest["role"] = to_string(zoo.role);
  json members = json::array();
  for (size_t i = 0; i < zoo.members.size(); ++i) {
    const ModelRecord& m = zoo.members[i];
    std::string file = "member-" + std::to_string(i) + "-" + m.arch.describe() + "-" +
                       hex64(m.provenance).substr(0, 8) + ".tlab";
    save_model(m, (fs::path(dir) / file).string());
    members.push_back(file);
  }
  manifest["members"] = members;
  std::ofstream out((fs::path(dir) / "zoo.json").string());
  out << manifest.dump(2) << '\n';
}

Zoo load_zoo(const std::string& dir) {
  std::ifstream in((fs::path(dir) / "zoo.json").string());
  if (!in) throw DataError(ParseErrc::missing_file, dir + "/zoo.json");
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw DataError(ParseErrc::bad_magic, dir + "/zoo.json: " + e.what());
  }
  Zoo zoo;
  std::string role = manifest.at("role").get<std::string>();
  zoo.role = role == "surrogate" ? ZooRole::surrogate : ZooRole::target;
  for (const json& f : manifest.at("members"))
    zoo.members.push_back(load_model((fs::path(dir) / f.get<std::string>()).string()));
  return zoo;
}

}  // namespace tlab
