#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "cfd/manifest.hpp"
#include "cfd/pipeline.hpp"
#include "doctest.h"

using namespace cfd;

namespace {

std::filesystem::path scratch(const char* name) {
    const auto d = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(d);
    std::filesystem::create_directories(d);
    return d;
}

// 8x8x3 volume whose slice 1 carries a 2x2 lesion
void write_patient(const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir / "v");
    Volume v(8, 8, 3), m(8, 8, 3);
    v.patient_id = m.patient_id = "P1";
    for (int z = 0; z < 3; ++z)
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 8; ++x) v.at(x, y, z) = static_cast<float>((x + y + z) % 5) / 4.0f;
    for (int y = 3; y < 5; ++y)
        for (int x = 3; x < 5; ++x) m.at(x, y, 1) = 1.0f;
    v.raw_max = 1.0;
    save_volume(v, (dir / "v" / "P1.json").string());
    save_volume(m, (dir / "v" / "P1_mask.json").string());
}

std::vector<ManifestRow> rows_for_p1() {
    std::vector<ManifestRow> rows;
    for (int z = 0; z < 3; ++z) rows.push_back({"P1", z, z == 1 ? 2 : 1, z == 2 ? "val" : "test", "v/P1.json", "v/P1_mask.json"});
    return rows;
}

}  // namespace

TEST_CASE("manifest round trip and slice loading") {
    const auto dir = scratch("cfd_manifest_test");
    write_patient(dir);
    const auto path = (dir / "manifest.csv").string();
    const auto rows = rows_for_p1();
    write_manifest(rows, path);
    const auto back = read_manifest(path);
    REQUIRE(back.size() == 3);
    CHECK(back[1].label == 2);
    CHECK(back[2].split == "val");
    CHECK(manifest_csv(back) == manifest_csv(rows));

    const auto test = load_slices(path, "test");
    REQUIRE(test.size() == 2);
    CHECK(test[1].id() == "P1:1");
    CHECK(test[1].label == 2);
    REQUIRE(test[1].mask);
    CHECK(test[1].mask->data[3 * 8 + 3] == 1);
    CHECK(load_slices(path).size() == 3);
    CHECK(load_slices(path, "train").empty());

    // loading from another working directory still resolves the paths
    const auto cwd = std::filesystem::current_path();
    std::filesystem::current_path(std::filesystem::temp_directory_path());
    CHECK(load_slices(path, "val").size() == 1);
    std::filesystem::current_path(cwd);

    auto bad = rows;
    bad[0].label = 2;
    write_manifest(bad, path);
    CHECK_THROWS_AS(load_slices(path), FormatError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("malformed manifests") {
    const auto dir = scratch("cfd_manifest_bad");
    const auto path = (dir / "m.csv").string();
    const std::string header = "patient,slice_index,label,split,volume_path,mask_path\n";
    for (const std::string& body : {std::string("a,b,c\n"), header + "P1,0,3,test,v.json,\n",
                                   header + "P1,x,1,test,v.json,\n", header + "P1,0,1,test\n",
                                   header + "P1,0,1,test,,\n"}) {
        std::ofstream(path) << body;
        CHECK_THROWS_AS(read_manifest(path), FormatError);
    }
    std::ofstream(path) << header + "P1,0,1,test,v.json,\n";
    CHECK(read_manifest(path).size() == 1);
    std::filesystem::remove_all(dir);
}

TEST_CASE("sweep cell selection") {
    std::vector<SweepCell> cells{{100, 1, 0.4, 3}, {100, 2, 0.5, 3}, {200, 1, 0.5, 3}, {200, 2, 0.3, 3}};
    CHECK(select_cell(cells) == 1);
    cells[2].mean_dsc = 0.6;
    CHECK(select_cell(cells) == 2);
    // equal scores: smallest D first, then smallest w
    std::vector<SweepCell> tie{{200, 1, 0.5, 3}, {100, 3, 0.5, 3}, {100, 2, 0.5, 3}};
    CHECK(select_cell(tie) == 2);
    CHECK(select_cell({{300, 4, 0.0, 1}}) == 0);
    CHECK_THROWS(select_cell({}));
}

TEST_CASE("sweep over a small grid") {
    const auto sched = make_linear_schedule(1000);
    SliceRecord s;
    s.pixels = Image(8, 8);
    s.mask = Mask(8, 8, 0);
    for (int y = 2; y < 4; ++y)
        for (int x = 2; x < 4; ++x) {
            s.pixels(y, x) = 0.9f;
            (*s.mask)(y, x) = 1;
        }
    s.label = 2;
    s.patient_id = "P";
    SliceRecord healthy = s;
    healthy.label = 1;
    healthy.mask = Mask(8, 8, 0);
    // predictor that pulls hot pixels toward zero under the healthy class only
    const NoiseFn eps = [](const Image& x, ClassLabel c, int) {
        Image e(x.height, x.width);
        if (c == ClassLabel::Healthy)
            for (std::size_t i = 0; i < x.size(); ++i) e.data[i] = 0.5f * x.data[i];
        return e;
    };
    const auto r = run_sweep({s, healthy}, eps, sched, {20, 40}, {1.0, 2.0, 3.0}, 10);
    REQUIRE(r.cells.size() == 6);
    CHECK(r.cells[0].D == 20);
    CHECK(r.cells[3].D == 40);
    CHECK(r.cells[4].w == 2.0);
    for (const auto& c : r.cells) CHECK(c.n == 1);
    CHECK(r.best == select_cell(r.cells));
    const auto csv = sweep_csv(r);
    CHECK(csv.rfind("D,w,mean_dsc,n,selected\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 7);
    CHECK(sweep_csv(run_sweep({s}, eps, sched, {20, 40}, {1.0, 2.0, 3.0}, 10)) == csv);
    CHECK_THROWS_AS(run_sweep({healthy}, eps, sched, {20}, {1.0}, 10), ParameterError);
}
