#include "pond/checkpoint.hpp"

#include "pond/errors.hpp"

namespace pond {

bool Archive::contains(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return true;
  return false;
}

std::vector<std::uint8_t> encode_archive(const Archive& archive) {
  Json header;
  header["kind"] = archive.kind;
  header["meta"] = archive.meta;
  Json list = Json::array();
  std::vector<double> payload;
  for (const auto& t : archive.tensors) {
    list.push_back(Json{{"name", t.name}, {"shape", t.value.shape()}});
    payload.insert(payload.end(), t.value.data().begin(), t.value.data().end());
  }
  header["tensors"] = std::move(list);
  return encode_container(kCheckpointMagic, header, payload);
}

Archive decode_archive(std::span<const std::uint8_t> bytes) {
  auto c = decode_container(bytes, kCheckpointMagic, [](const Json& h) {
    std::size_t n = 0;
    for (const auto& t : h.at("tensors")) n += ng::numel(t.at("shape").get<ng::Shape>());
    return n;
  });
  Archive a;
  try {
    a.kind = c.header.at("kind").get<std::string>();
    a.meta = c.header.at("meta");
    std::size_t off = 0;
    for (const auto& t : c.header.at("tensors")) {
      auto shape = t.at("shape").get<ng::Shape>();
      const std::size_t n = ng::numel(shape);
      std::vector<double> v(c.payload.begin() + static_cast<std::ptrdiff_t>(off),
                            c.payload.begin() + static_cast<std::ptrdiff_t>(off + n));
      off += n;
      a.tensors.push_back({t.at("name").get<std::string>(), ng::Tensor(std::move(shape), std::move(v))});
    }
  } catch (const Json::exception& e) {
    throw IoError(std::string("malformed checkpoint header: ") + e.what());
  } catch (const ShapeError& e) {
    throw IoError(std::string("malformed checkpoint header: ") + e.what());
  }
  return a;
}

void save_archive(const Archive& archive, const std::filesystem::path& path) {
  write_file(path, encode_archive(archive));
}

Archive load_archive(const std::filesystem::path& path) { return decode_archive(read_file(path)); }

void append_model(Archive& archive, const MoEModel& model) {
  archive.meta["model"] = model.config.to_json();
  for (std::size_t e = 0; e < model.experts.size(); ++e)
    for (const auto& p : model.experts[e])
      archive.tensors.push_back({"expert" + std::to_string(e) + "/" + p.name, p.value});
  for (const auto& p : model.router) archive.tensors.push_back({"router/" + p.name, p.value});
}

MoEModel extract_model(const Archive& archive) {
  ModelConfig config;
  try {
    config = ModelConfig::from_json(archive.meta.at("model"));
  } catch (const Json::exception& e) {
    throw IoError(std::string("checkpoint has no model config: ") + e.what());
  }
  // Fresh parameters give the expected names and shapes; values are replaced.
  MoEModel model = init_model(config, 0);
  auto fill = [&](ParamList& list, const std::string& prefix) {
    for (auto& p : list) {
      const std::string name = prefix + p.name;
      if (!archive.contains(name)) throw CompatibilityError("checkpoint lacks tensor " + name);
      const auto& t = archive.at(name);
      if (t.shape() != p.value.shape()) throw CompatibilityError("tensor " + name + " has the wrong shape");
      p.value = t;
    }
  };
  for (std::size_t e = 0; e < model.experts.size(); ++e) fill(model.experts[e], "expert" + std::to_string(e) + "/");
  fill(model.router, "router/");
  return model;
}

void save_model(const MoEModel& model, const std::filesystem::path& path) {
  Archive a;
  a.kind = "model";
  append_model(a, model);
  save_archive(a, path);
}

MoEModel load_model(const std::filesystem::path& path) {
  Archive a = load_archive(path);
  if (a.kind != "model") throw CompatibilityError("expected a model checkpoint, found '" + a.kind + "'");
  return extract_model(a);
}

}  // namespace pond
