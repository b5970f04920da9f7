#include "cfd/manifest.hpp"

#include <filesystem>
#include <map>
#include <sstream>

#include "cfd/binary_io.hpp"

namespace cfd {

namespace {
constexpr const char* kHeader = "patient,slice_index,label,split,volume_path,mask_path";

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur += ch;
        }
    }
    out.push_back(cur);
    return out;
}
}  // namespace

std::string manifest_csv(const std::vector<ManifestRow>& rows) {
    std::string out = std::string(kHeader) + "\n";
    for (const auto& r : rows)
        out += r.patient + "," + std::to_string(r.slice_index) + "," + std::to_string(r.label) + "," + r.split + "," +
               r.volume_path + "," + r.mask_path + "\n";
    return out;
}

void write_manifest(const std::vector<ManifestRow>& rows, const std::string& path) {
    io::write_text(path, manifest_csv(rows));
}

std::vector<ManifestRow> read_manifest(const std::string& path) {
    std::istringstream in(io::read_text(path));
    std::string line;
    std::uint64_t offset = 0;
    if (!std::getline(in, line) || split_csv(line) != split_csv(kHeader))
        throw FormatError("manifest header must be '" + std::string(kHeader) + "'", 0);
    offset += line.size() + 1;
    std::vector<ManifestRow> rows;
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line != "\r") {
            const auto f = split_csv(line);
            if (f.size() != 6) throw FormatError("manifest line " + std::to_string(lineno) + " needs 6 fields", offset);
            ManifestRow r;
            r.patient = f[0];
            try {
                std::size_t used = 0;
                r.slice_index = std::stoi(f[1], &used);
                if (used != f[1].size()) throw std::invalid_argument("slice");
                r.label = std::stoi(f[2], &used);
                if (used != f[2].size()) throw std::invalid_argument("label");
            } catch (const std::exception&) {
                throw FormatError("manifest line " + std::to_string(lineno) + " has a bad number", offset);
            }
            if (r.label != 1 && r.label != 2)
                throw FormatError("manifest line " + std::to_string(lineno) + ": label must be 1 or 2", offset);
            r.split = f[3];
            r.volume_path = f[4];
            r.mask_path = f[5];
            if (r.volume_path.empty())
                throw FormatError("manifest line " + std::to_string(lineno) + " has no volume path", offset);
            rows.push_back(std::move(r));
        }
        offset += line.size() + 1;
    }
    return rows;
}

std::vector<SliceRecord> load_slices(const std::string& manifest_path, const std::string& split) {
    const auto base = std::filesystem::path(manifest_path).parent_path();
    auto resolve = [&](const std::string& p) { return (base / p).string(); };
    std::map<std::pair<std::string, std::string>, std::vector<SliceRecord>> cache;
    std::vector<SliceRecord> out;
    for (const auto& row : read_manifest(manifest_path)) {
        if (!split.empty() && row.split != split) continue;
        auto key = std::make_pair(row.volume_path, row.mask_path);
        auto it = cache.find(key);
        if (it == cache.end()) {
            const Volume img = load_volume(resolve(row.volume_path));
            if (row.mask_path.empty()) {
                it = cache.emplace(key, slices_of(img, nullptr)).first;
            } else {
                const Volume mask = load_volume(resolve(row.mask_path));
                if (mask.nx != img.nx || mask.ny != img.ny || mask.nz != img.nz)
                    throw FormatError("mask grid differs from " + row.volume_path, 0);
                it = cache.emplace(key, slices_of(img, &mask)).first;
            }
        }
        if (row.slice_index < 0 || row.slice_index >= static_cast<int>(it->second.size()))
            throw FormatError("slice " + std::to_string(row.slice_index) + " out of range for " + row.volume_path, 0);
        SliceRecord r = it->second[static_cast<std::size_t>(row.slice_index)];
        if (!row.mask_path.empty() && r.label != row.label)
            throw FormatError("manifest label disagrees with the mask for " + r.id(), 0);
        r.label = row.label;
        r.patient_id = row.patient;
        out.push_back(std::move(r));
    }
    return out;
}

}  // namespace cfd
