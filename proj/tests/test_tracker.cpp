#include <csignal>
#include <random>
#include <thread>
#include <sys/wait.h>
#include <unistd.h>

#include <gtest/gtest.h>

#include "scanflow/dataset.hpp"
#include "scanflow/tracker.hpp"
#include "support.hpp"

using namespace scanflow;

TEST(Tracker, KindInferredFromValue) {
  auto b = TrackerStore::process_metadata({{" n ", " acc ", 0.5, std::nullopt},
                                           {"n", "note", std::string("hi"), std::nullopt}});
  EXPECT_EQ(b[0].key, "acc");
  EXPECT_EQ(b[0].node_id, "n");
  EXPECT_EQ(*b[0].kind, MetaKind::kMetric);
  EXPECT_EQ(*b[1].kind, MetaKind::kTag);
  EXPECT_THROW(TrackerStore::process_metadata({{"n", "  ", 1.0, std::nullopt}}), ConfigError);
  EXPECT_THROW(TrackerStore::process_metadata({{"n", "k", std::string("x"), MetaKind::kMetric}}),
               ConfigError);
}

TEST(Tracker, BatchIsAllOrNothing) {
  test::TempDir dir;
  TrackerStore st(dir.path());
  EXPECT_TRUE(st.save_metadata({metric("a", "x", 1)}, "r1"));
  EXPECT_FALSE(st.save_metadata({metric("a", "y", 2), {"a", "", 3.0, std::nullopt}}, "r1"));
  EXPECT_FALSE(st.last_error().empty());
  EXPECT_EQ(st.gather_log({"r1"}).size(), 1u);
  EXPECT_FALSE(st.save_metadata({metric("a", "x", 1)}, "../escape"));
}

TEST(Tracker, UnknownRunIsNotFoundButEmptyMatchIsEmpty) {
  test::TempDir dir;
  TrackerStore st(dir.path());
  st.register_run("r1");
  EXPECT_THROW(st.gather_log({"r2"}), NotFound);
  EXPECT_TRUE(st.gather_log({"r1"}).empty());
  EXPECT_THROW(st.get_tracker_uri("r2"), NotFound);
  EXPECT_EQ(st.get_tracker_uri("r1"), "local");
}

TEST(Tracker, TimestampsStrictlyIncrease) {
  test::TempDir dir;
  TrackerStore st(dir.path());
  for (int i = 0; i < 50; ++i) st.save_metadata({metric("n", "k", i), metric("n", "k", i)}, "r");
  auto all = st.dump();
  for (std::size_t i = 1; i < all.size(); ++i) EXPECT_LT(all[i - 1].timestamp, all[i].timestamp);
}

TEST(Tracker, ArtifactsAreContentAddressed) {
  test::TempDir dir;
  TrackerStore st(dir.path());
  auto ref = st.log_artifact("r", "train", "model.bin", "weights");
  EXPECT_EQ(ref, sha256_hex("weights"));
  EXPECT_EQ(st.fetch_artifact(ref), "weights");
  EXPECT_EQ(st.log_artifact("r", "train", "copy.bin", "weights"), ref);
  auto refs = st.gather_log({"r", std::nullopt, std::nullopt, MetaKind::kArtifactRef});
  ASSERT_EQ(refs.size(), 2u);
  EXPECT_EQ(std::get<std::string>(refs[0].value), ref);
  EXPECT_THROW(st.fetch_artifact(std::string(64, '0')), NotFound);
  EXPECT_THROW(st.fetch_artifact("../../etc/passwd"), NotFound);
}

TEST(Tracker, Sha256KnownVector) {
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Tracker, RandomQueriesMatchLinearScan) {
  test::TempDir dir;
  TrackerStore st(dir.path());
  std::mt19937_64 rng(3);
  const std::vector<std::string> runs{"r0", "r1", "r2"}, nodes{"train", "eval", "checker", "improver"},
      keys{"acc", "acc/clean", "loss", "loss/train", "lr", "note", "tag/x"};
  std::vector<MetadataEntry> oracle;
  auto pick = [&](const auto& v) { return v[rng() % v.size()]; };
  for (int b = 0; b < 300; ++b) {
    auto run = pick(runs);
    std::vector<MetadataInput> batch;
    for (std::size_t k = 0, n = 1 + rng() % 4; k < n; ++k) {
      auto kind = static_cast<MetaKind>(rng() % 3);
      MetaValue v = kind == MetaKind::kMetric ? MetaValue(double(rng() % 1000) / 7.0)
                                              : MetaValue("v" + std::to_string(rng() % 50));
      batch.push_back({pick(nodes), pick(keys), v, kind});
    }
    ASSERT_TRUE(st.save_metadata(batch, run));
  }
  oracle = st.dump();
  // Reloading from disk must give the same store.
  TrackerStore reloaded(dir.path());
  EXPECT_EQ(reloaded.dump(), oracle);

  for (int q = 0; q < 1000; ++q) {
    TrackerQuery query{pick(runs)};
    if (rng() % 2) query.node_id = pick(nodes);
    if (rng() % 2) query.key_prefix = std::string(pick(keys)).substr(0, 1 + rng() % 3);
    if (rng() % 2) query.kind = static_cast<MetaKind>(rng() % 4);
    std::vector<MetadataEntry> want;
    for (const auto& e : oracle) {
      if (e.run_id != query.run_id) continue;
      if (query.node_id && e.node_id != *query.node_id) continue;
      if (query.key_prefix && e.key.compare(0, query.key_prefix->size(), *query.key_prefix) != 0)
        continue;
      if (query.kind && e.kind != *query.kind) continue;
      want.push_back(e);
    }
    ASSERT_EQ(reloaded.gather_log(query), want) << "query " << q;
  }
}

// A child process commits numbered batches and reports each one after
// save_metadata returns; the parent kills it mid-stream. Every reported
// batch must survive the restart.
TEST(Tracker, KillRestartLosesNoCommittedBatch) {
  test::TempDir dir;
  for (int round = 0; round < 3; ++round) {
    int fds[2];
    ASSERT_EQ(::pipe(fds), 0);
    pid_t pid = ::fork();
    ASSERT_GE(pid, 0);
    if (pid == 0) {
      ::close(fds[0]);
      TrackerStore st(dir.path());
      for (int i = 0;; ++i) {
        std::vector<MetadataInput> batch;
        for (int k = 0; k < 5; ++k) batch.push_back(metric("w", "b" + std::to_string(round), i));
        if (!st.save_metadata(batch, "durable")) ::_exit(3);
        if (::write(fds[1], &i, sizeof i) != sizeof i) ::_exit(4);
      }
    }
    ::close(fds[1]);
    int last = -1, got = 0;
    while (last < 40 + 30 * round && ::read(fds[0], &got, sizeof got) == sizeof got) last = got;
    ::kill(pid, SIGKILL);
    int status = 0;
    ::waitpid(pid, &status, 0);
    while (::read(fds[0], &got, sizeof got) == sizeof got) last = got;
    ::close(fds[0]);

    TrackerStore st(dir.path());
    auto entries = st.gather_log({"durable", std::nullopt, "b" + std::to_string(round)});
    std::map<int, int> per_batch;
    for (const auto& e : entries) ++per_batch[static_cast<int>(std::get<double>(e.value))];
    for (int i = 0; i <= last; ++i) ASSERT_EQ(per_batch[i], 5) << "round " << round << " batch " << i;
    for (const auto& [i, c] : per_batch) EXPECT_EQ(c, 5) << "partial batch " << i;
  }
}

TEST(Tracker, TornTailDiscardedOnReload) {
  test::TempDir dir;
  {
    TrackerStore st(dir.path());
    st.save_metadata({metric("n", "a", 1)}, "r");
    st.save_metadata({metric("n", "b", 2)}, "r");
  }
  auto log = dir.path() / "runs" / "r" / "log.jsonl";
  {
    std::ofstream out(log, std::ios::app);
    out << R"([{"run_id":"r","node_id":"n","key":"c")";
  }
  TrackerStore st(dir.path());
  EXPECT_EQ(st.gather_log({"r"}).size(), 2u);
  EXPECT_TRUE(st.save_metadata({metric("n", "d", 4)}, "r"));
  TrackerStore again(dir.path());
  auto all = again.gather_log({"r"});
  ASSERT_EQ(all.size(), 3u);
  EXPECT_EQ(all.back().key, "d");
}

TEST(Tracker, ConcurrentWritersAllLand) {
  test::TempDir dir;
  TrackerStore st(dir.path());
  std::vector<std::thread> ts;
  for (int t = 0; t < 4; ++t)
    ts.emplace_back([&, t] {
      for (int i = 0; i < 100; ++i) st.save_metadata({metric("t" + std::to_string(t), "k", i)}, "r");
    });
  for (auto& t : ts) t.join();
  EXPECT_EQ(st.gather_log({"r"}).size(), 400u);
  EXPECT_EQ(TrackerStore(dir.path()).gather_log({"r"}).size(), 400u);
}

TEST(Idx, FixtureRoundTripIsBitExact) {
  for (const char* name : {"digits8-images-idx3-ubyte", "digits8-labels-idx1-ubyte"}) {
    auto bytes = read_binary(std::filesystem::path(SCANFLOW_DATA_DIR) / name);
    auto parsed = parse_idx(bytes);
    EXPECT_EQ(serialize_idx(parsed), bytes) << name;
  }
  auto d = load_idx_dataset(std::filesystem::path(SCANFLOW_DATA_DIR) / "digits8-images-idx3-ubyte",
                            std::filesystem::path(SCANFLOW_DATA_DIR) / "digits8-labels-idx1-ubyte");
  EXPECT_EQ(d.size(), 1797u);
  EXPECT_EQ(d.height(), 8u);
  EXPECT_EQ(serialize_idx(idx_from_images(d.images)),
            read_binary(std::filesystem::path(SCANFLOW_DATA_DIR) / "digits8-images-idx3-ubyte"));
}

TEST(Idx, RandomRoundTrip) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 20; ++t) {
    IdxData d{kIdxImages, {std::uint32_t(1 + rng() % 5), std::uint32_t(1 + rng() % 9),
                           std::uint32_t(1 + rng() % 9)}, {}};
    d.raw.resize(std::size_t(d.dims[0]) * d.dims[1] * d.dims[2]);
    for (auto& b : d.raw) b = static_cast<std::uint8_t>(rng());
    auto bytes = serialize_idx(d);
    auto back = parse_idx(bytes);
    EXPECT_EQ(back.dims, d.dims);
    EXPECT_EQ(back.raw, d.raw);
    EXPECT_EQ(serialize_idx(idx_from_images(back.images())), bytes);
  }
}

TEST(Idx, MalformedInputRejected) {
  EXPECT_THROW(parse_idx("abc"), FormatError);
  std::string bad("\x00\x00\x08\x03\x00\x00\x00\x02\x00\x00\x00\x02\x00\x00\x00\x02\x01", 17);
  EXPECT_THROW(parse_idx(bad), FormatError);  // 8 bytes promised, 1 present
  std::string wrong_type("\x00\x00\x0d\x01\x00\x00\x00\x01\x00", 9);
  EXPECT_THROW(parse_idx(wrong_type), FormatError);
}
