#include <doctest.h>

// Eigen before httplib: <resolv.h> (pulled in by httplib) defines a `_res`
// macro that clashes with Eigen parameter names.
#include "support.hpp"
#include "thermoviab/error.hpp"
#include "thermoviab/gateway.hpp"
#include "thermoviab/render.hpp"

#include <httplib.h>

#include <json.hpp>

using namespace thermoviab;
using nlohmann::json;

namespace {

// A served data root of four half-size phantom cases, plus a model bundle
// trained on synthetic records so that the predict stage has something to run.
struct Fixture {
  tvtest::TempDir tmp{"gateway"};
  std::vector<std::string> ids;
  std::unique_ptr<Gateway> gateway;
  std::unique_ptr<httplib::Client> client;

  Fixture() {
    PhantomSpec base;  // study_specs scales the geometry with the frame size
    base.width = 160;
    base.height = 120;
    ids = generate_study(tmp.path / "data", 4, 0.5, 11, base);
    Rng rng(5);
    std::vector<FeatureRecord> train, val;
    std::vector<int> ytrain, yval;
    for (int i = 0; i < 16; ++i) {
      train.push_back(tvtest::synthetic_record(rng, i % 2, "t" + std::to_string(i)));
      ytrain.push_back(i % 2);
    }
    for (int i = 0; i < 6; ++i) {
      val.push_back(tvtest::synthetic_record(rng, i % 2, "v" + std::to_string(i)));
      yval.push_back(i % 2);
    }
    TrainOptions opts;
    opts.forest.trees = 8;
    save_bundle(train_bundle(train, ytrain, val, yval, opts), tmp.path / "model");

    GatewayConfig cfg;
    cfg.data_root = tmp.path / "data";
    cfg.model_dir = tmp.path / "model";
    gateway = std::make_unique<Gateway>(cfg);
    const int port = gateway->start();
    client = std::make_unique<httplib::Client>("127.0.0.1", port);
    client->set_read_timeout(60, 0);
  }

  json get(const std::string& path, int expect = 200) {
    auto res = client->Get(path);
    REQUIRE(res);
    CHECK_MESSAGE(res->status == expect, path << " -> " << res->body);
    return json::parse(res->body);
  }

  json run(const std::string& id, const json& body, int expect = 202) {
    auto res = client->Post("/api/cases/" + id + "/run", body.dump(), "application/json");
    REQUIRE(res);
    CHECK_MESSAGE(res->status == expect, res->body);
    return json::parse(res->body);
  }

  // Runs a stage to completion and returns the final job document.
  json run_to_end(const std::string& id, const json& body) {
    const json job = run(id, body);
    gateway->drain();
    return get("/api/jobs/" + job.at("job_id").get<std::string>());
  }
};

}  // namespace

TEST_SUITE("gateway") {
  TEST_CASE("case listing, details and unknown ids") {
    Fixture fx;
    const json cases = fx.get("/api/cases");
    REQUIRE(cases.size() == 4);
    CHECK(cases[0].at("case_id") == fx.ids[0]);
    CHECK(cases[0].at("status").at("stage") == "raw");
    CHECK(cases[0].contains("label"));

    const json one = fx.get("/api/cases/" + fx.ids[1]);
    CHECK(one.at("manifest").at("case_id") == fx.ids[1]);
    CHECK(one.at("annotations").size() == 1);
    CHECK(one.at("artifacts").empty());

    const json missing = fx.get("/api/cases/nope", 404);
    CHECK(missing.at("error") == "UnknownCase");
    CHECK(missing.contains("message"));
    fx.get("/api/cases/nope/frames/3.png", 404);
    fx.get("/api/jobs/job-999", 404);
  }

  TEST_CASE("frame images carry the temperature window") {
    Fixture fx;
    const std::string base = "/api/cases/" + fx.ids[0];
    auto res = fx.client->Get(base + "/frames/15.png");
    REQUIRE(res);
    CHECK(res->status == 200);
    CHECK(res->get_header_value("Content-Type") == "image/png");
    CHECK(res->get_header_value("X-Palette") == "iron");
    CHECK(std::stod(res->get_header_value("X-Frame-Timestamp")) == doctest::Approx(15.0));
    CHECK(std::stod(res->get_header_value("X-Temperature-Min")) < std::stod(res->get_header_value("X-Temperature-Max")));
    const RgbImage img = decode_png(res->body);
    CHECK(img.width == 160);
    CHECK(img.height == 120);

    REQUIRE(fx.client->Get(base + "/frames/precool.png"));
    CHECK(fx.client->Get(base + "/frames/precool.png")->status == 200);
    CHECK(fx.client->Get(base + "/frames/999.png")->status == 404);
    CHECK(fx.client->Get(base + "/frames/x1.png")->status == 404);
    // Aligned views need the alignment stage.
    CHECK(fx.client->Get(base + "/frames/15.png?aligned=1")->status == 409);
  }

  TEST_CASE("annotation edits are validated and rasterized") {
    Fixture fx;
    const std::string path = "/api/cases/" + fx.ids[0] + "/annotations";
    const std::vector<Point2> square{{30.0, 20.0}, {60.0, 20.0}, {60.0, 50.0}, {30.0, 50.0}};
    const json body = {{"annotations",
                        {{{"nodule_id", "n1"}, {"point", {45.0, 35.0}}, {"polygon", {{30, 20}, {60, 20}, {60, 50}, {30, 50}}}}}}};
    auto res = fx.client->Put(path, body.dump(), "application/json");
    REQUIRE(res);
    CHECK_MESSAGE(res->status == 200, res->body);
    const json out = json::parse(res->body);
    CHECK(out.at("roi_pixels")[0] == rasterize_polygon(square, 160, 120).count());
    CHECK(out.at("annotations")[0].at("nodule_id") == "n1");
    CHECK(fx.get("/api/cases/" + fx.ids[0]).at("annotations")[0].at("point")[0] == 45.0);

    // Self-intersecting polygon.
    const json bowtie = {{"annotations",
                          {{{"nodule_id", "n1"}, {"point", {45.0, 35.0}}, {"polygon", {{0, 0}, {10, 10}, {10, 0}, {0, 10}}}}}}};
    res = fx.client->Put(path, bowtie.dump(), "application/json");
    REQUIRE(res);
    CHECK(res->status == 422);
    // Zero-area polygon.
    const json flat = {{"annotations",
                        {{{"nodule_id", "n1"}, {"point", {45.0, 35.0}}, {"polygon", {{0, 0}, {10, 0}, {20, 0}}}}}}};
    CHECK(fx.client->Put(path, flat.dump(), "application/json")->status == 422);
    CHECK(fx.client->Put(path, "{not json", "application/json")->status == 422);
    // The rejected edits left the stored annotations untouched.
    CHECK(fx.get("/api/cases/" + fx.ids[0]).at("annotations")[0].at("polygon").size() == 4);
  }

  TEST_CASE("stage runs, ordering, busy cases and results") {
    Fixture fx;
    const std::string id = fx.ids[0];
    const std::string base = "/api/cases/" + id;

    CHECK(fx.run(id, {{"stage", "segment"}}, 409).at("error") == "StageOrder");
    CHECK(fx.run(id, {{"stage", "features"}}, 409).at("message") == "alignment missing");
    CHECK(fx.run(id, {{"stage", "bake"}}, 400).at("error") == "InvalidSpec");
    CHECK(fx.get(base + "/result", 409).at("message") == "prediction missing");

    // Two submissions in a row: the second one finds the case busy, and
    // annotation edits are refused while the job is pending.
    const json job = fx.run(id, {{"stage", "align"}});
    CHECK(job.at("status") == "queued");
    const json second = fx.run(id, {{"stage", "align"}}, 409);
    CHECK(second.at("error") == "Busy");
    const json original = fx.get(base).at("annotations");
    auto put = fx.client->Put(base + "/annotations", original.dump(), "application/json");
    REQUIRE(put);
    if (put->status != 200) CHECK(put->status == 409);  // the worker may already be done
    fx.gateway->drain();
    const json done = fx.get("/api/jobs/" + job.at("job_id").get<std::string>());
    REQUIRE(done.at("status") == "succeeded");
    for (double r : done.at("result").at("rho")) CHECK(r > 0.9);
    CHECK(fx.get(base).at("status").at("stage") == "aligned");
    CHECK(fx.client->Get(base + "/frames/15.png?aligned=1")->status == 200);

    const json registration = fx.get(base + "/registration");
    CHECK(registration.at("rho").size() == 121);
    CHECK(registration.at("review_required") == false);
    const RgbImage after = decode_png(base64_decode(registration.at("after_png").get<std::string>()));
    CHECK(after.width == 160);
    CHECK(fx.get(base + "/registration?t=400", 404).at("error") == "UnknownFrame");

    CHECK(fx.run(id, {{"stage", "predict"}}, 409).at("message") == "segmentation missing");
    const json seg = fx.run_to_end(id, {{"stage", "segment"}, {"segmenter", "otsu"}});
    REQUIRE(seg.at("status") == "succeeded");
    CHECK(seg.at("result").at("pixels").get<int>() > 0);

    const json curves = fx.get(base + "/curves");
    CHECK(curves.at("t").size() == 121);
    REQUIRE(curves.at("nodules").size() == 1);
    CHECK(curves.at("nodules")[0].at("series").size() == 6);
    for (const auto& s : curves.at("nodules")[0].at("series")) CHECK(s.at("values").size() == 121);

    const json pred = fx.run_to_end(id, {{"stage", "predict"}});
    REQUIRE_MESSAGE(pred.at("status") == "succeeded", pred.dump());
    const json result = fx.get(base + "/result");
    CHECK(result.at("case_id") == id);
    CHECK(result.at("votes").size() == 5);
    CHECK(result.at("F") == pred.at("result").at("F"));

    // Editing the annotations drops features and prediction but not the ROI.
    json anns = fx.get(base).at("annotations");
    anns[0]["point"][0] = anns[0]["point"][0].get<double>() + 1.0;
    put = fx.client->Put(base + "/annotations", json{{"annotations", anns}}.dump(), "application/json");
    REQUIRE(put);
    CHECK(put->status == 200);
    CHECK(json::parse(put->body).at("status").at("stage") == "segmented");
    fx.get(base + "/result", 409);
    CHECK(fx.run_to_end(id, {{"stage", "features"}}).at("status") == "succeeded");
    CHECK(fx.run_to_end(id, {{"stage", "predict"}}).at("status") == "succeeded");
    fx.get(base + "/result");

    // A failing job reports its error instead of a result.
    const json net = fx.run_to_end(id, {{"stage", "segment"}, {"segmenter", "net"}});
    CHECK(net.at("status") == "failed");
    CHECK(net.at("error").at("error") == "InvalidSpec");
  }
}
