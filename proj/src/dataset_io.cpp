#include "pond/dataset_io.hpp"

#include "pond/errors.hpp"

namespace pond {

std::vector<std::uint8_t> encode_dataset(const DomainDataset& d) {
  d.validate();
  Json header;
  header["domain_id"] = d.domain_id;
  header["n"] = d.channels;
  header["L"] = d.length;
  header["K"] = d.classes;
  header["count"] = d.size();
  Json splits = Json::array(), labels = Json::array();
  for (std::size_t i = 0; i < d.size(); ++i) {
    splits.push_back(split_name(d.splits[i]));
    labels.push_back(d.instances[i].label);
  }
  header["splits"] = std::move(splits);
  header["labels"] = std::move(labels);

  std::vector<double> payload;
  payload.reserve(d.size() * d.channels * d.length);
  for (const auto& inst : d.instances)
    payload.insert(payload.end(), inst.series.values.begin(), inst.series.values.end());
  return encode_container(kDatasetMagic, header, payload);
}

DomainDataset decode_dataset(std::span<const std::uint8_t> bytes) {
  auto c = decode_container(bytes, kDatasetMagic, [](const Json& h) {
    return h.at("count").get<std::size_t>() * h.at("n").get<std::size_t>() * h.at("L").get<std::size_t>();
  });
  DomainDataset d;
  try {
    d.domain_id = c.header.at("domain_id").get<std::string>();
    d.channels = c.header.at("n").get<std::size_t>();
    d.length = c.header.at("L").get<std::size_t>();
    d.classes = c.header.at("K").get<std::size_t>();
    const auto count = c.header.at("count").get<std::size_t>();
    const auto& splits = c.header.at("splits");
    const auto& labels = c.header.at("labels");
    if (splits.size() != count || labels.size() != count)
      throw IoError("header split/label lists do not match count");
    const std::size_t stride = d.channels * d.length;
    for (std::size_t i = 0; i < count; ++i) {
      std::vector<double> v(c.payload.begin() + static_cast<std::ptrdiff_t>(i * stride),
                            c.payload.begin() + static_cast<std::ptrdiff_t>((i + 1) * stride));
      d.instances.push_back({Series(d.channels, d.length, std::move(v)), labels[i].get<std::size_t>()});
      d.splits.push_back(parse_split(splits[i].get<std::string>()));
    }
  } catch (const Json::exception& e) {
    throw IoError(std::string("malformed dataset header: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw IoError(e.what());
  }
  try {
    d.validate();
  } catch (const InvalidArgument& e) {
    throw IoError(e.what());
  }
  return d;
}

void save_dataset(const DomainDataset& dataset, const std::filesystem::path& path) {
  write_file(path, encode_dataset(dataset));
}

DomainDataset load_dataset(const std::filesystem::path& path) { return decode_dataset(read_file(path)); }

}  // namespace pond
