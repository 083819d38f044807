#include "pcgen/checkpoint.hpp"

#include <fstream>
#include <set>

#include "pcgen/tnsr.hpp"

namespace pcgen {

namespace fs = std::filesystem;

namespace {

constexpr const char* kFormat = "pcgen-checkpoint";
constexpr int kFormatVersion = 1;

void check_name(const std::string& name) {
    if (name.empty()) throw CheckpointError("checkpoint: empty tensor name");
    for (char c : name) {
        const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '.' ||
                        c == '_' || c == '-';
        if (!ok) throw CheckpointError("checkpoint: invalid character in tensor name '" + name + "'");
    }
}

}  // namespace

const CheckpointEntry* LoadedCheckpoint::find(const std::string& name) const {
    for (const auto& e : entries)
        if (e.name == name) return &e;
    return nullptr;
}

const Tensor& LoadedCheckpoint::at(const std::string& name) const {
    const auto* e = find(name);
    if (!e) throw CheckpointError("checkpoint: missing tensor '" + name + "'");
    return e->tensor;
}

void write_checkpoint(const fs::path& dir, const nlohmann::json& meta, const std::vector<CheckpointEntry>& entries) {
    std::set<std::string> seen;
    for (const auto& e : entries) {
        check_name(e.name);
        if (!seen.insert(e.name).second) throw CheckpointError("checkpoint: duplicate tensor name '" + e.name + "'");
        if (!e.tensor.defined()) throw CheckpointError("checkpoint: tensor '" + e.name + "' is undefined");
    }

    fs::path tmp = dir;
    tmp += ".tmp";
    fs::remove_all(tmp);
    fs::create_directories(tmp);

    nlohmann::json manifest;
    manifest["format"] = kFormat;
    manifest["version"] = kFormatVersion;
    manifest["meta"] = meta;
    manifest["tensors"] = nlohmann::json::array();
    for (const auto& e : entries) {
        const std::string file = e.name + ".tnsr";
        tnsr::save(tmp / file, e.tensor);
        manifest["tensors"].push_back({{"name", e.name}, {"file", file}, {"shape", e.tensor.shape()}, {"frozen", e.frozen}});
    }
    {
        std::ofstream out(tmp / "manifest.json");
        out << manifest.dump(2) << '\n';
        if (!out) throw CheckpointError("checkpoint: cannot write manifest in " + tmp.string());
    }
    fs::remove_all(dir);
    fs::rename(tmp, dir);
}

LoadedCheckpoint read_checkpoint(const fs::path& dir) {
    const fs::path mpath = dir / "manifest.json";
    std::ifstream in(mpath);
    if (!in) throw CheckpointError("checkpoint: cannot open " + mpath.string());
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError("checkpoint: malformed manifest " + mpath.string() + ": " + e.what());
    }
    if (manifest.value("format", "") != kFormat || manifest.value("version", 0) != kFormatVersion)
        throw CheckpointError("checkpoint: " + mpath.string() + " is not a version-1 pcgen checkpoint");

    LoadedCheckpoint out;
    out.meta = manifest.value("meta", nlohmann::json::object());
    try {
        for (const auto& t : manifest.at("tensors")) {
            CheckpointEntry e;
            e.name = t.at("name").get<std::string>();
            check_name(e.name);
            e.frozen = t.value("frozen", false);
            e.tensor = tnsr::load(dir / t.at("file").get<std::string>());
            if (e.tensor.shape() != t.at("shape").get<Shape>())
                throw CheckpointError("checkpoint: tensor '" + e.name + "' has shape " + shape_str(e.tensor.shape()) +
                                      ", manifest says " + t.at("shape").dump());
            out.entries.push_back(std::move(e));
        }
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError("checkpoint: bad tensor list in " + mpath.string() + ": " + e.what());
    }
    return out;
}

}  // namespace pcgen
