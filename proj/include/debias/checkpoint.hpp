#pragma once

// Checkpoint directory format: manifest.json (names, shapes, dtype, file
// offsets, rng states, step counters, serialized config) + params.bin
// (little-endian float32, concatenated in manifest entry order).
// Round-trips are bit-exact; writes go to a temp dir then rename.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "debias/tensor.hpp"

namespace debias {

namespace fs = std::filesystem;
using json = nlohmann::json;

struct CheckpointEntry {
    std::string name;
    Shape shape;
    std::string kind;  // "param" | "buffer" | "opt"
    int64_t offset = 0;  // in floats
    int64_t count = 0;
};

class CheckpointWriter {
  public:
    void add(const std::string& name, const Shape& shape, const std::string& kind,
             const float* data, int64_t count) {
        CheckpointEntry e{name, shape, kind, static_cast<int64_t>(blob_.size()), count};
        entries_.push_back(std::move(e));
        blob_.insert(blob_.end(), data, data + count);
    }

    void add(const std::string& name, const std::string& kind, Tensor& t) {
        add(name, t.shape(), kind, t.ptr(), t.numel());
    }

    void add(const std::string& name, const std::string& kind, const std::vector<float>& v) {
        add(name, {static_cast<int>(v.size())}, kind, v.data(), static_cast<int64_t>(v.size()));
    }

    json& meta() { return meta_; }

    // Atomic: assemble in <dir>.tmp, then rename over <dir>.
    void write(const std::string& dir) const {
        static_assert(std::endian::native == std::endian::little,
                      "params.bin writer assumes a little-endian host");
        const fs::path final_dir(dir);
        const fs::path tmp_dir(dir + ".tmp");
        fs::remove_all(tmp_dir);
        fs::create_directories(tmp_dir);

        json manifest = meta_;
        manifest["format"] = "debias-checkpoint-v1";
        manifest["dtype"] = "float32";
        manifest["byte_order"] = "little";
        json jentries = json::array();
        for (const auto& e : entries_) {
            json je;
            je["name"] = e.name;
            je["shape"] = e.shape;
            je["kind"] = e.kind;
            je["offset"] = e.offset;
            je["count"] = e.count;
            jentries.push_back(std::move(je));
        }
        manifest["entries"] = std::move(jentries);
        {
            std::ofstream out(tmp_dir / "manifest.json");
            if (!out) throw IoError("checkpoint: cannot write " + (tmp_dir / "manifest.json").string());
            out << manifest.dump(2) << "\n";
        }
        {
            std::ofstream out(tmp_dir / "params.bin", std::ios::binary);
            if (!out) throw IoError("checkpoint: cannot write " + (tmp_dir / "params.bin").string());
            out.write(reinterpret_cast<const char*>(blob_.data()),
                      static_cast<std::streamsize>(blob_.size() * sizeof(float)));
            if (!out) throw IoError("checkpoint: short write to params.bin");
        }
        fs::remove_all(final_dir);
        fs::create_directories(final_dir.parent_path().empty() ? "." : final_dir.parent_path().string());
        fs::rename(tmp_dir, final_dir);
    }

  private:
    std::vector<CheckpointEntry> entries_;
    std::vector<float> blob_;
    json meta_;
};

class CheckpointReader {
  public:
    explicit CheckpointReader(const std::string& dir) {
        const fs::path root(dir);
        std::ifstream min(root / "manifest.json");
        if (!min) throw IoError("checkpoint: missing " + (root / "manifest.json").string());
        manifest_ = json::parse(min);
        if (manifest_.value("format", "") != "debias-checkpoint-v1")
            throw IoError("checkpoint: unrecognized format in " + dir);
        std::ifstream bin(root / "params.bin", std::ios::binary);
        if (!bin) throw IoError("checkpoint: missing " + (root / "params.bin").string());
        bin.seekg(0, std::ios::end);
        const auto bytes = static_cast<size_t>(bin.tellg());
        bin.seekg(0);
        blob_.resize(bytes / sizeof(float));
        bin.read(reinterpret_cast<char*>(blob_.data()), static_cast<std::streamsize>(bytes));
        if (bin.gcount() != static_cast<std::streamsize>(bytes))
            throw IoError("checkpoint: truncated params.bin in " + dir);
        for (const auto& je : manifest_.at("entries")) {
            CheckpointEntry e;
            e.name = je.at("name").get<std::string>();
            e.shape = je.at("shape").get<Shape>();
            e.kind = je.at("kind").get<std::string>();
            e.offset = je.at("offset").get<int64_t>();
            e.count = je.at("count").get<int64_t>();
            if (e.offset < 0 || e.offset + e.count > static_cast<int64_t>(blob_.size()))
                throw IoError("checkpoint: entry " + e.name + " exceeds params.bin");
            index_[e.name] = entries_.size();
            entries_.push_back(std::move(e));
        }
    }

    const json& meta() const { return manifest_; }
    bool has(const std::string& name) const { return index_.count(name) != 0; }

    void read_into(const std::string& name, float* dst, int64_t count) const {
        const auto it = index_.find(name);
        if (it == index_.end()) throw IoError("checkpoint: no entry named " + name);
        const auto& e = entries_[it->second];
        if (e.count != count)
            throw IoError("checkpoint: entry " + name + " holds " + std::to_string(e.count) +
                          " values, expected " + std::to_string(count));
        std::memcpy(dst, blob_.data() + e.offset, static_cast<size_t>(count) * sizeof(float));
    }

    void read_into(const std::string& name, Tensor& t) const { read_into(name, t.ptr(), t.numel()); }
    void read_into(const std::string& name, std::vector<float>& v) const {
        read_into(name, v.data(), static_cast<int64_t>(v.size()));
    }

    Tensor read_tensor(const std::string& name) const {
        const auto it = index_.find(name);
        if (it == index_.end()) throw IoError("checkpoint: no entry named " + name);
        const auto& e = entries_[it->second];
        auto t = Tensor::zeros(e.shape);
        read_into(name, t);
        return t;
    }

    // Entries of one kind, in manifest order.
    std::vector<std::string> names_with_prefix(const std::string& prefix) const {
        std::vector<std::string> out;
        for (const auto& e : entries_)
            if (e.name.rfind(prefix, 0) == 0) out.push_back(e.name);
        return out;
    }

  private:
    json manifest_;
    std::vector<float> blob_;
    std::vector<CheckpointEntry> entries_;
    std::map<std::string, size_t> index_;
};

}  // namespace debias
