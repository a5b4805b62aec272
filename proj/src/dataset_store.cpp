#include "udaseg/dataset.hpp"

#include <json.hpp>

#include "udaseg/fsutil.hpp"
#include "udaseg/volume_io.hpp"

namespace udaseg {

void EvaluationRegistry::put(const std::string& case_id, LabelMap labels) {
  labels_.insert_or_assign(case_id, std::move(labels));
}

const LabelMap& EvaluationRegistry::lookup(const std::string& case_id) const {
  const auto it = labels_.find(case_id);
  require(it != labels_.end(), ErrorKind::InvalidArgument,
          "evaluation registry has no labels for case " + case_id);
  return it->second;
}

std::vector<const Case*> Dataset::pool(Site site, Modality modality) const {
  std::vector<const Case*> out;
  for (const auto& c : train)
    if (c.tag.site == site && c.tag.modality == modality && c.tag.provenance == Provenance::Real)
      out.push_back(&c);
  return out;
}

}  // namespace udaseg

namespace udaseg::store {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

std::string volume_rel(const Case& c) {
  return std::string(to_string(c.tag.site)) + "/" + to_string(c.tag.modality) + "/" + c.id + ".nii";
}

json case_entry(const Case& c, const char* split) {
  json e = {{"id", c.id},
            {"site", to_string(c.tag.site)},
            {"modality", to_string(c.tag.modality)},
            {"provenance", to_string(c.tag.provenance)},
            {"split", split},
            {"volume", volume_rel(c)}};
  e["labels"] = c.labels ? json("labels/" + c.id + ".nii") : json(nullptr);
  if (c.tag.origin)
    e["origin"] = {{"model_id", c.tag.origin->model_id},
                   {"source_case", c.tag.origin->source_case},
                   {"mode", c.tag.origin->mode}};
  return e;
}

void write_case(const Case& c, const fs::path& root) {
  c.validate();
  const fs::path vp = root / volume_rel(c);
  fs::create_directories(vp.parent_path());
  io::save_volume(c.volume, vp);
  if (c.labels) {
    fs::create_directories(root / "labels");
    io::save_labels(*c.labels, root / "labels" / (c.id + ".nii"));
  }
}

// Manifest paths must stay inside the dataset root.
fs::path resolve(const fs::path& root, const std::string& rel) {
  const fs::path p(rel);
  require(!rel.empty() && p.is_relative(), ErrorKind::Parse, "dataset: path '" + rel + "' must be relative");
  for (const auto& part : p)
    require(part != "..", ErrorKind::Parse, "dataset: path '" + rel + "' leaves the dataset root");
  return root / p;
}

template <class T>
T field(const json& e, const char* key, const std::string& where) {
  const auto it = e.find(key);
  require(it != e.end(), ErrorKind::Parse, "dataset: " + where + ": missing '" + key + "'");
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    fail(ErrorKind::Parse, "dataset: " + where + ": bad value for '" + key + "'");
  }
}

Case read_case(const json& e, const fs::path& root, const std::string& where) {
  Case c;
  c.id = field<std::string>(e, "id", where);
  c.tag.site = parse_site(field<std::string>(e, "site", where));
  c.tag.modality = parse_modality(field<std::string>(e, "modality", where));
  c.tag.provenance = parse_provenance(field<std::string>(e, "provenance", where));
  if (e.contains("origin") && !e["origin"].is_null()) {
    const auto& o = e["origin"];
    c.tag.origin = PseudoOrigin{field<int>(o, "model_id", where + ".origin"),
                                field<std::string>(o, "source_case", where + ".origin"),
                                field<std::string>(o, "mode", where + ".origin")};
  }
  c.volume = io::load_volume(resolve(root, field<std::string>(e, "volume", where)));
  if (e.contains("labels") && !e["labels"].is_null())
    c.labels = io::load_labels(resolve(root, field<std::string>(e, "labels", where)));
  c.validate();
  return c;
}

}  // namespace

void save_dataset(const Dataset& ds, const fs::path& root) {
  fs::create_directories(root);
  json m;
  m["format"] = "udaseg-dataset";
  m["version"] = 1;
  m["cases"] = json::array();
  std::map<std::string, int> seen;
  auto add = [&](const Case& c, const char* split) {
    require(++seen[c.id] == 1, ErrorKind::InvalidArgument, "dataset: duplicate case id " + c.id);
    write_case(c, root);
    m["cases"].push_back(case_entry(c, split));
  };
  for (const Case& c : ds.train) add(c, "train");
  for (const Case& c : ds.validation) add(c, "validation");
  m["withheld_labels"] = json::object();
  if (ds.eval.size() > 0) fs::create_directories(root / "eval");
  for (const auto& [id, lm] : ds.eval.entries()) {
    io::save_labels(lm, root / "eval" / (id + ".nii"));
    m["withheld_labels"][id] = "eval/" + id + ".nii";
  }
  fsutil::write_atomic(root / kManifest, m.dump(1) + "\n");
}

Dataset load_dataset(const fs::path& root) {
  const fs::path mp = root / kManifest;
  require(fs::exists(mp), ErrorKind::Io, "dataset: no " + std::string(kManifest) + " under '" + root.string() + "'");
  json m;
  try {
    m = json::parse(fsutil::read_file(mp));
  } catch (const json::parse_error& e) {
    throw ParseError("dataset: " + mp.string() + ": " + e.what(), e.byte);
  }
  require(m.is_object() && m.value("format", "") == "udaseg-dataset", ErrorKind::Parse,
          "dataset: " + mp.string() + " is not a dataset manifest");
  require(m.value("version", 0) == 1, ErrorKind::Parse, "dataset: unsupported manifest version");
  Dataset ds;
  const auto& cases = m.at("cases");
  require(cases.is_array(), ErrorKind::Parse, "dataset: 'cases' must be an array");
  std::map<std::string, int> seen;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const std::string where = "cases[" + std::to_string(i) + "]";
    Case c = read_case(cases[i], root, where);
    require(++seen[c.id] == 1, ErrorKind::Parse, "dataset: duplicate case id " + c.id);
    const auto split = field<std::string>(cases[i], "split", where);
    if (split == "train")
      ds.train.push_back(std::move(c));
    else if (split == "validation")
      ds.validation.push_back(std::move(c));
    else
      fail(ErrorKind::Parse, "dataset: " + where + ": unknown split '" + split + "'");
  }
  if (m.contains("withheld_labels")) {
    for (const auto& [id, rel] : m["withheld_labels"].items()) {
      require(rel.is_string(), ErrorKind::Parse, "dataset: withheld_labels." + id + " must be a path");
      ds.eval.put(id, io::load_labels(resolve(root, rel.get<std::string>())));
    }
  }
  return ds;
}

}  // namespace udaseg::store
