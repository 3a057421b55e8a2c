#include "mtuda/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "mtuda/error.hpp"

using nlohmann::json;

namespace mtuda {

namespace {

constexpr char kMagic[8] = {'M', 'T', 'U', 'D', 'A', 'C', 'K', '1'};

struct ArrayEntry {
  std::string name;
  torch::Tensor value;
};

std::string dtype_name(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat32: return "f32";
    case torch::kFloat64: return "f64";
    default: throw Error(ErrorKind::invalid_argument, "checkpoint: unsupported dtype");
  }
}

torch::ScalarType dtype_from(const std::string& s) {
  if (s == "f32") return torch::kFloat32;
  if (s == "f64") return torch::kFloat64;
  throw Error(ErrorKind::format, "checkpoint: unknown dtype '" + s + "'");
}

json bank_json(const PrototypeBank& b) {
  return {{"initialized", std::vector<bool>(b.initialized.begin(), b.initialized.end())}, {"momentum", b.momentum}};
}

}  // namespace

void write_file_atomic(const std::filesystem::path& path, const std::string& text) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorKind::format, "cannot write " + tmp.string());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    require(static_cast<bool>(out), ErrorKind::format, "short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void save_checkpoint(const std::filesystem::path& path, const TrainState& state, const CheckpointMeta& meta) {
  std::vector<ArrayEntry> arrays;
  for (const auto& p : state.student->named_parameters()) arrays.push_back({"student." + p.key(), p.value().detach()});
  for (const auto& p : state.teacher->named_parameters()) arrays.push_back({"teacher." + p.key(), p.value().detach()});
  arrays.push_back({"proto.source", state.proto_source.prototypes.detach()});
  arrays.push_back({"proto.target", state.proto_target.prototypes.detach()});
  arrays.push_back({"queue.entries", state.queue.storage()});

  json table = json::array();
  std::uint64_t offset = 0;
  std::vector<torch::Tensor> blobs;
  for (const auto& a : arrays) {
    auto t = a.value.contiguous();
    const auto nbytes = static_cast<std::uint64_t>(t.numel()) * t.element_size();
    table.push_back({{"name", a.name}, {"dtype", dtype_name(t.scalar_type())}, {"shape", t.sizes().vec()},
                     {"offset", offset}, {"nbytes", nbytes}});
    offset += nbytes;
    blobs.push_back(t);
  }
  const json header = {
      {"format", "mtuda-checkpoint"},
      {"version", 1},
      {"config", meta.config.to_json()},
      {"config_hash", meta.config.hash()},
      {"seed", meta.seed},
      {"splits", meta.splits.to_json()},
      {"step", state.step},
      {"epoch", state.epoch},
      {"student_step_count", state.student->step_count},
      {"teacher_step_count", state.teacher->step_count},
      {"proto_source", bank_json(state.proto_source)},
      {"proto_target", bank_json(state.proto_target)},
      {"queue", {{"size", state.queue.size()}, {"cursor", state.queue.write_cursor()}}},
      {"arrays", table},
      {"extra", meta.extra},
  };
  const std::string text = header.dump();
  std::string buffer(kMagic, sizeof(kMagic));
  std::uint64_t len = text.size();
  buffer.append(reinterpret_cast<const char*>(&len), sizeof(len));
  buffer += text;
  for (const auto& t : blobs) buffer.append(static_cast<const char*>(t.data_ptr()), static_cast<std::size_t>(t.numel()) * t.element_size());
  write_file_atomic(path, buffer);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::format, "cannot open checkpoint " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string data = ss.str();
  require(data.size() >= 16 && std::memcmp(data.data(), kMagic, 8) == 0, ErrorKind::format,
          path.string() + " is not a checkpoint");
  std::uint64_t len = 0;
  std::memcpy(&len, data.data() + 8, sizeof(len));
  require(16 + len <= data.size(), ErrorKind::format, "truncated checkpoint header in " + path.string());
  json header;
  try {
    header = json::parse(data.substr(16, len));
  } catch (const json::exception& e) {
    throw Error(ErrorKind::format, "corrupt checkpoint header in " + path.string() + ": " + e.what());
  }
  const std::size_t base = 16 + len;

  LoadedCheckpoint out;
  try {
    out.meta.config = TrainConfig::from_json(header.at("config"));
    out.meta.seed = header.at("seed").get<std::uint64_t>();
    out.meta.splits = RunSplits::from_json(header.at("splits"));
    out.meta.extra = header.value("extra", json::object());

    std::map<std::string, torch::Tensor> arrays;
    for (const auto& e : header.at("arrays")) {
      const auto offset = e.at("offset").get<std::uint64_t>(), nbytes = e.at("nbytes").get<std::uint64_t>();
      require(base + offset + nbytes <= data.size(), ErrorKind::format, "truncated checkpoint data in " + path.string());
      const auto shape = e.at("shape").get<std::vector<std::int64_t>>();
      auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype_from(e.at("dtype").get<std::string>())));
      require(static_cast<std::uint64_t>(t.numel()) * t.element_size() == nbytes, ErrorKind::format,
              "array size mismatch in checkpoint");
      std::memcpy(t.data_ptr(), data.data() + base + offset, nbytes);
      arrays[e.at("name").get<std::string>()] = t;
    }
    auto take = [&](const std::string& name) {
      auto it = arrays.find(name);
      require(it != arrays.end(), ErrorKind::format, "checkpoint lacks array '" + name + "'");
      return it->second;
    };

    const auto dtype = take("proto.source").scalar_type();
    auto& s = out.state;
    s.student = SegNet(out.meta.config.network);
    s.student->to(dtype);
    s.teacher = SegNet(out.meta.config.network);
    s.teacher->to(dtype);
    {
      torch::NoGradGuard no_grad;
      for (auto& p : s.student->named_parameters()) p.value().copy_(take("student." + p.key()));
      for (auto& p : s.teacher->named_parameters()) p.value().copy_(take("teacher." + p.key()));
    }
    for (auto& p : s.teacher->parameters()) p.set_requires_grad(false);
    s.student->step_count = header.at("student_step_count").get<std::int64_t>();
    s.teacher->step_count = header.at("teacher_step_count").get<std::int64_t>();
    auto bank = [&](const json& j, const std::string& name) {
      PrototypeBank b;
      b.prototypes = take(name);
      const auto init = j.at("initialized").get<std::vector<bool>>();
      b.initialized.assign(init.begin(), init.end());
      b.momentum = j.at("momentum").get<double>();
      require(b.prototypes.dim() == 2 && b.prototypes.size(0) == b.num_classes(), ErrorKind::format,
              "prototype bank shape mismatch in checkpoint");
      return b;
    };
    s.proto_source = bank(header.at("proto_source"), "proto.source");
    s.proto_target = bank(header.at("proto_target"), "proto.target");
    s.queue = NegativeQueue::restore(take("queue.entries"), header.at("queue").at("size").get<std::int64_t>(),
                                     header.at("queue").at("cursor").get<std::int64_t>());
    s.step = header.at("step").get<std::int64_t>();
    s.epoch = header.at("epoch").get<int>();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::format, "malformed checkpoint header in " + path.string() + ": " + e.what());
  }
  return out;
}

}  // namespace mtuda
