#include "obsd/archive.hpp"

#include <fstream>

#include "obsd/common.hpp"
#include "obsd/sha256.hpp"

namespace obsd {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string blob_filename(size_t index, const std::string& name) {
    std::string s = name;
    for (char& c : s)
        if (!std::isalnum((unsigned char)c) && c != '_' && c != '-') c = '_';
    return "p" + std::to_string(index) + "_" + s + ".f64";
}

void write_blob(const fs::path& path, const std::vector<double>& v) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write blob: " + path.string());
    f.write((const char*)v.data(), (std::streamsize)(v.size() * sizeof(double)));
    if (!f) throw DataError("blob write failed: " + path.string());
}

std::vector<double> read_blob(const fs::path& path, size_t count) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot read blob: " + path.string());
    std::vector<double> v(count);
    f.read((char*)v.data(), (std::streamsize)(count * sizeof(double)));
    if (f.gcount() != (std::streamsize)(count * sizeof(double)))
        throw DataError("blob truncated: " + path.string());
    return v;
}

}  // namespace

void save_archive(const fs::path& dir, const ArchiveManifest& manifest,
                  const nn::ParamStore& params, nn::Adam* opt) {
    fs::create_directories(dir / "blobs");
    json index = json::array();
    size_t i = 0;
    for (auto& [name, t] : params.items()) {
        std::string file = blob_filename(i, name);
        write_blob(dir / "blobs" / file, t.values());
        index.push_back({{"name", name}, {"shape", t.shape()}, {"file", file}});
        ++i;
    }
    json j;
    j["schema_version"] = manifest.schema_version;
    j["kind"] = manifest.kind;
    j["config"] = manifest.config;
    j["config_digest"] = manifest.config_digest;
    j["seed"] = manifest.seed;
    j["epoch"] = manifest.epoch;
    j["step"] = manifest.step;
    j["loss_history"] = manifest.loss_history;
    j["extra"] = manifest.extra;
    j["params"] = index;
    j["param_digest"] = archive_param_digest(params);
    if (opt) {
        fs::create_directories(dir / "opt");
        auto& m = opt->m();
        auto& v = opt->v();
        for (size_t k = 0; k < m.size(); ++k) {
            write_blob(dir / "opt" / ("m" + std::to_string(k) + ".f64"), m[k]);
            write_blob(dir / "opt" / ("v" + std::to_string(k) + ".f64"), v[k]);
        }
        j["optimizer"] = {{"step_count", opt->step_count()}, {"tensors", m.size()}};
    }
    std::ofstream f(dir / "manifest.json");
    if (!f) throw DataError("cannot write manifest: " + (dir / "manifest.json").string());
    f << j.dump(2) << "\n";
}

ArchiveManifest read_manifest(const fs::path& dir) {
    std::ifstream f(dir / "manifest.json");
    if (!f) throw DataError("missing archive manifest: " + (dir / "manifest.json").string());
    json j = json::parse(f);
    ArchiveManifest m;
    m.schema_version = j.at("schema_version");
    m.kind = j.at("kind");
    m.config = j.at("config");
    m.config_digest = j.value("config_digest", "");
    m.seed = j.at("seed");
    m.epoch = j.at("epoch");
    m.step = j.at("step");
    m.loss_history = j.at("loss_history").get<std::vector<double>>();
    m.extra = j.value("extra", json::object());
    return m;
}

ArchiveManifest load_archive(const fs::path& dir, nn::ParamStore& params, nn::Adam* opt) {
    std::ifstream f(dir / "manifest.json");
    if (!f) throw DataError("missing archive manifest: " + (dir / "manifest.json").string());
    json j = json::parse(f);
    const auto& index = j.at("params");
    if (index.size() != params.items().size())
        throw DataError("archive parameter count mismatch: archive has " +
                        std::to_string(index.size()) + ", model has " +
                        std::to_string(params.items().size()));
    for (size_t i = 0; i < index.size(); ++i) {
        const auto& entry = index[i];
        const auto& [name, t] = params.items()[i];
        if (entry.at("name") != name)
            throw DataError("archive parameter order mismatch at " + name);
        auto shape = entry.at("shape").get<std::vector<int>>();
        if (shape != t.shape())
            throw DataError("archive shape mismatch for " + name);
        auto v = read_blob(dir / "blobs" / entry.at("file").get<std::string>(),
                           (size_t)t.numel());
        const_cast<nn::Tensor&>(t).values() = std::move(v);
    }
    if (opt && j.contains("optimizer")) {
        size_t count = j["optimizer"].at("tensors");
        if (count != opt->m().size()) throw DataError("optimizer state count mismatch");
        for (size_t k = 0; k < count; ++k) {
            opt->m()[k] = read_blob(dir / "opt" / ("m" + std::to_string(k) + ".f64"),
                                    opt->m()[k].size());
            opt->v()[k] = read_blob(dir / "opt" / ("v" + std::to_string(k) + ".f64"),
                                    opt->v()[k].size());
        }
        opt->set_step_count(j["optimizer"].at("step_count"));
    }
    ArchiveManifest m;
    m.schema_version = j.at("schema_version");
    m.kind = j.at("kind");
    m.config = j.at("config");
    m.config_digest = j.value("config_digest", "");
    m.seed = j.at("seed");
    m.epoch = j.at("epoch");
    m.step = j.at("step");
    m.loss_history = j.at("loss_history").get<std::vector<double>>();
    m.extra = j.value("extra", json::object());
    return m;
}

std::string archive_param_digest(const nn::ParamStore& params) {
    Sha256 h;
    for (auto& [name, t] : params.items()) {
        h.update(name);
        h.update(t.values().data(), t.values().size() * sizeof(double));
    }
    return h.hex();
}

}  // namespace obsd
