// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <cstdio>
#include <filesystem>

#include <gtest/gtest.h>

#include "rsparse/io.hpp"
#include "rsparse/synthetic.hpp"

using namespace rsparse;

TEST(Annotations, ParsesDegreesAndNormalizes) {
  const auto r = parse_annotations("img1 800 800 100 120 50 20 30 ship\n");
  ASSERT_EQ(r.size(), 1u);
  EXPECT_EQ(r[0].scene_id, "img1");
  EXPECT_EQ(r[0].image_width, 800);
  EXPECT_DOUBLE_EQ(r[0].box.cx, 100);
  EXPECT_DOUBLE_EQ(r[0].box.w, 50);
  EXPECT_NEAR(r[0].box.theta, kPi / 6, 1e-15);
  EXPECT_EQ(r[0].label, "ship");
  EXPECT_EQ(r[0].split, "");

  const auto q = parse_annotations("a 10 10 5 5 4 2 90 ship inshore");
  ASSERT_EQ(q.size(), 1u);
  EXPECT_DOUBLE_EQ(q[0].box.w, 2);
  EXPECT_DOUBLE_EQ(q[0].box.h, 4);
  EXPECT_NEAR(q[0].box.theta, 0.0, 1e-15);
  EXPECT_EQ(q[0].split, "inshore");
}

TEST(Annotations, CommentsAndBlankLines) {
  const auto r = parse_annotations("# header\n\n  a 10 10 5 5 4 2 0 ship # trailing\n\t\nb 10 10 5 5 4 2 0 ship\n");
  ASSERT_EQ(r.size(), 2u);
  EXPECT_EQ(r[1].scene_id, "b");
}

TEST(Annotations, Errors) {
  try {
    parse_annotations("img1 800 800 100 120 -5 20 30 ship");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 1u);
    EXPECT_NE(std::string(e.what()).find("non-positive width"), std::string::npos);
  }
  try {
    parse_annotations("a 10 10 5 5 4 2 0 ship\n\nb 10 10 5 5 4 x 0 ship\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
  EXPECT_THROW(parse_annotations("a 10 10 5 5 4 2 0"), ParseError);
  EXPECT_THROW(parse_annotations("a 10 10 5 5 4 0 0 ship"), ParseError);
  EXPECT_THROW(parse_annotations("a 0 10 5 5 4 2 0 ship"), ParseError);
  EXPECT_THROW(parse_annotations("a 10 10 5 5 4 2 0 ship harbour"), ParseError);
  EXPECT_THROW(parse_annotations("a 10 10 nan 5 4 2 0 ship"), ParseError);
}

TEST(Annotations, RoundTrip) {
  SyntheticSceneConfig cfg;
  cfg.channels = 10;
  cfg.min_level = cfg.max_level = 5;
  const auto data = generate_synthetic_dataset<float>(cfg, 6);
  std::vector<AnnotationRecord> recs;
  for (const auto& s : data)
    for (const auto& r : scene_annotations(s.truth)) recs.push_back(r);
  ASSERT_FALSE(recs.empty());
  const auto back = parse_annotations(write_annotations(recs));
  ASSERT_EQ(back.size(), recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    EXPECT_EQ(back[i].scene_id, recs[i].scene_id);
    EXPECT_EQ(back[i].split, recs[i].split);
    EXPECT_EQ(back[i].box.cx, recs[i].box.cx);
    EXPECT_EQ(back[i].box.w, recs[i].box.w);
    EXPECT_NEAR(back[i].box.theta, recs[i].box.theta, 1e-15);
  }
  const auto scenes = group_annotations(back);
  ASSERT_LE(scenes.size(), data.size());
  for (const auto& s : scenes) EXPECT_FALSE(s.boxes.empty());
}

TEST(Annotations, GroupingRejectsInconsistentSizes) {
  EXPECT_THROW(group_annotations(parse_annotations("a 10 10 5 5 4 2 0 ship\na 12 10 5 5 4 2 0 ship\n")), Error);
  const auto g = group_annotations(parse_annotations("b 10 10 5 5 4 2 0 ship\na 9 9 5 5 4 2 0 ship\nb 10 10 1 1 4 2 0 ship"));
  ASSERT_EQ(g.size(), 2u);
  EXPECT_EQ(g[0].scene_id, "b");
  EXPECT_EQ(g[0].boxes.size(), 2u);
}

TEST(DetectionsJson, EmptyAndRoundTrip) {
  EXPECT_EQ(nlohmann::json::parse(write_detections({})), nlohmann::json::array());
  EXPECT_TRUE(parse_detections("[]").empty());
  SceneDetections sd{"x", "abc", {{{10.123456789, 20, 30, 5, 0.7}, 0.987654321, true}, {{1, 2, 3, 4, -1.2}, 0.1, false}}};
  const auto text = write_detections({sd});
  const auto j = nlohmann::json::parse(text);
  EXPECT_EQ(j[0]["detections"][0]["cx"].get<double>(), 10.1235);
  EXPECT_EQ(j[0]["detections"][0]["score"].get<double>(), 0.987654);
  EXPECT_EQ(j[0]["config_hash"], "abc");
  const auto back = parse_detections(text);
  ASSERT_EQ(back.size(), 1u);
  ASSERT_EQ(back[0].detections.size(), 2u);
  EXPECT_NEAR(back[0].detections[0].box.theta, 0.7, 1e-5);
  EXPECT_FALSE(back[0].detections[1].keep);
  EXPECT_EQ(write_detections(back), text);
}

TEST(DetectionsJson, Errors) {
  EXPECT_THROW(parse_detections("{"), Error);
  EXPECT_THROW(parse_detections("{}"), Error);
  EXPECT_THROW(parse_detections(R"([{"scene_id":"a"}])"), Error);
  EXPECT_THROW(parse_detections(R"([{"scene_id":"a","detections":[{"cx":1}]}])"), Error);
  EXPECT_THROW(parse_detections(R"([{"scene_id":"a","detections":[{"cx":1,"cy":1,"w":2,"h":2,"theta_deg":0,"score":2}]}])"),
               Error);
}

TEST(RoundSignificant, Digits) {
  EXPECT_EQ(round_significant(123456789.0), 123457000.0);
  EXPECT_EQ(round_significant(0.000123456789), 0.000123457);
  EXPECT_EQ(round_significant(0.0), 0.0);
}

namespace {

ModelConfig small_model() {
  ModelConfig c;
  c.num_proposals = 5;
  c.channels = 8;
  c.hidden = 2;
  c.heads = 2;
  c.stages = 2;
  c.init = ProposalInit::kRandom;
  c.seed = 4;
  return c;
}

ArchiveError::Kind kind_of(const std::string& bytes) {
  try {
    deserialize_archive(bytes);
  } catch (const ArchiveError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error";
  return ArchiveError::Kind::kIo;
}

}  // namespace

TEST(Archive, WeightsRoundTripIsByteStable) {
  auto m = make_model<double>(small_model());
  const std::string bytes = serialize_weights(m);
  auto back = deserialize_weights<double>(bytes);
  EXPECT_EQ(serialize_weights(back), bytes);
  EXPECT_EQ(config_hash(back.config), config_hash(m.config));
  std::size_t k = 0;
  auto orig = m.parameters();
  for (auto* p : back.parameters()) {
    const auto* q = orig[k++];
    ASSERT_EQ(p->value.shape(), q->value.shape());
    for (std::size_t i = 0; i < p->value.size(); ++i) EXPECT_EQ(p->value[i], double(float(q->value[i])));
  }
}

TEST(Archive, FileRoundTrip) {
  const auto path = (std::filesystem::temp_directory_path() / "rsparse_io_test.rsrc").string();
  const auto m = make_model<float>(small_model());
  save_weights(m, path);
  const auto back = load_weights<float>(path);
  EXPECT_EQ(serialize_weights(back), serialize_weights(m));
  std::remove(path.c_str());
  try {
    load_weights<float>(path);
    FAIL();
  } catch (const ArchiveError& e) {
    EXPECT_EQ(e.kind(), ArchiveError::Kind::kIo);
  }
}

TEST(Archive, ErrorKinds) {
  using K = ArchiveError::Kind;
  const std::string good = serialize_weights(make_model<float>(small_model()));
  EXPECT_EQ(kind_of("not an archive"), K::kUnrecognized);
  EXPECT_EQ(kind_of(std::string(kArchiveMagic) + "\x01"), K::kTruncated);
  EXPECT_EQ(kind_of(good.substr(0, 20)), K::kTruncated);
  EXPECT_EQ(kind_of(good.substr(0, good.size() - 4)), K::kPayloadMismatch);
  EXPECT_EQ(kind_of(good + "abcd"), K::kPayloadMismatch);
  std::string garbled = good;
  garbled[kArchiveMagic.size() + 8] = '!';
  EXPECT_EQ(kind_of(garbled), K::kUnrecognized);
}

TEST(Archive, WeightsMustFitModel) {
  Archive a = deserialize_archive(serialize_weights(make_model<float>(small_model())));
  a.tensors.back().value = Tensor<float>(Shape{3});
  try {
    deserialize_weights<float>(serialize_archive(a));
    FAIL();
  } catch (const ArchiveError& e) {
    EXPECT_EQ(e.kind(), ArchiveError::Kind::kPayloadMismatch);
  }
  Archive extra = deserialize_archive(serialize_weights(make_model<float>(small_model())));
  extra.tensors.push_back({"stray", Tensor<float>(Shape{1})});
  EXPECT_THROW(deserialize_weights<float>(serialize_archive(extra)), ArchiveError);
}

TEST(Archive, PyramidRoundTrip) {
  SyntheticSceneConfig cfg;
  cfg.channels = 12;
  cfg.image_width = 96;
  cfg.image_height = 64;
  cfg.seed = 8;
  const auto s = generate_synthetic_scene<float>(cfg);
  const std::string bytes = serialize_pyramid(s.pyramid);
  const auto back = deserialize_pyramid<float>(bytes);
  ASSERT_EQ(back.levels.size(), s.pyramid.levels.size());
  EXPECT_EQ(back.image_width, 96);
  for (std::size_t i = 0; i < back.levels.size(); ++i) {
    EXPECT_EQ(back.levels[i].level, s.pyramid.levels[i].level);
    EXPECT_EQ(back.levels[i].values, s.pyramid.levels[i].values);
  }
  EXPECT_EQ(serialize_pyramid(back), bytes);
  EXPECT_THROW(deserialize_pyramid<float>(serialize_weights(make_model<float>(small_model()))), ArchiveError);
}

TEST(ModelConfigJson, RoundTripAndHash) {
  ModelConfig c;
  EXPECT_EQ(config_from_json(config_to_json(c)).fusion, c.fusion);
  EXPECT_EQ(config_to_json(config_from_json(config_to_json(c))), config_to_json(c));
  const auto h = config_hash(c);
  EXPECT_EQ(h.size(), 16u);
  EXPECT_EQ(config_hash(c), h);
  c.fusion = FusionKind::kAddition;
  EXPECT_NE(config_hash(c), h);
  const auto o = config_from_json(nlohmann::json{{"alpha", "13/7"}, {"pooling", "separate"}, {"init", "grid"}});
  EXPECT_DOUBLE_EQ(o.alpha, 13.0 / 7);
  EXPECT_EQ(o.pooling, PoolingKind::kSeparate);
  EXPECT_EQ(o.init, ProposalInit::kGrid);
  EXPECT_THROW(config_from_json(nlohmann::json{{"bogus", 1}}), Error);
  EXPECT_THROW(config_from_json(nlohmann::json{{"fusion", "concat"}}), Error);
  EXPECT_THROW(parse_ratio("1/0"), Error);
  EXPECT_DOUBLE_EQ(parse_ratio("1.5"), 1.5);
}
