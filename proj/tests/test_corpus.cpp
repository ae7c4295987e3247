#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "helpers.hpp"

using namespace ddr;
using ddr::testing::scratch_dir;
namespace fs = std::filesystem;

namespace {

void write(const fs::path& p, const std::string& text) {
  std::ofstream(p) << text;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), {}};
}

/// Smallest valid dataset directory.
DatasetPaths minimal_fixture(const fs::path& dir) {
  write(dir / "passages.jsonl",
        "{\"id\":\"p1\",\"text\":\"Protein folding in cells\"}\n"
        "{\"id\":\"p2\",\"text\":\"Vaccines cause autism\"}\n");
  write(dir / "queries_train.jsonl", "{\"id\":\"t1\",\"text\":\"folding\",\"task_label\":\"scifact\"}\n");
  write(dir / "queries_test.jsonl", "{\"id\":\"e1\",\"text\":\"autism claim\",\"task_label\":\"scifact\"}\n");
  write(dir / "qrels.tsv", "t1\tp1\t1\ne1\tp2\t2\n");
  write(dir / "domain_map.jsonl",
        "{\"domains\":[\"science\",\"qa\",\"fact-checking\"]}\n"
        "{\"task\":\"scifact\",\"domains\":[\"science\",\"fact-checking\"]}\n");
  return DatasetPaths::in_directory(dir.string());
}

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const DataError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Vocabulary, MinCountAndReservedTokens) {
  const auto v = build_vocab({"a a b"}, 2);
  EXPECT_EQ(v.tokens(), (std::vector<std::string>{"[PAD]", "[UNK]", "[CLS]", "a"}));
  EXPECT_EQ(v.id("a"), 3);
  EXPECT_EQ(v.id("b"), kUnkId);
  // Count descending, then alphabetical.
  const auto w = build_vocab({"c b a", "b c", "c"}, 1);
  EXPECT_EQ(w.tokens(), (std::vector<std::string>{"[PAD]", "[UNK]", "[CLS]", "c", "b", "a"}));
  EXPECT_EQ(Vocabulary::parse(w.serialize()), w);
  EXPECT_THROW(Vocabulary::parse("a\nb\n"), DataError);
  EXPECT_THROW(Vocabulary::parse("[PAD]\n[UNK]\n[CLS]\nx\nx\n"), DataError);
  EXPECT_THROW(build_vocab({}, 1), DataError);
}

TEST(Tokenizer, ClsPrefixUnknownsAndTruncation) {
  const Vocabulary v({"hello", "world"});
  EXPECT_EQ(tokenize("", v, 8), (TokenIds{kClsId}));
  EXPECT_EQ(tokenize("Hello, WORLD! zzz", v, 8), (TokenIds{kClsId, 3, 4, kUnkId}));
  EXPECT_EQ(tokenize("hello world hello world", v, 3), (TokenIds{kClsId, 3, 4}));
  EXPECT_EQ(split_words("a-b_c  D"), (std::vector<std::string>{"a", "b_c", "d"}));
}

TEST(Loader, ReadsMinimalFixture) {
  const auto dir = scratch_dir("corpus_min");
  const auto d = load_dataset(minimal_fixture(dir), true);
  ASSERT_EQ(d.passages.size(), 2u);
  EXPECT_EQ(d.passages[0].text, "Protein folding in cells");
  EXPECT_EQ(d.train_queries[0].task_label, "scifact");
  EXPECT_EQ(d.qrels.at("e1").at("p2"), 2);
  EXPECT_TRUE(d.general_queries.empty());
  EXPECT_TRUE(d.negatives.empty());
  // A SciFact-like task routes to science and fact-checking.
  EXPECT_EQ(d.domain_map.lookup("scifact"), (std::vector<std::size_t>{0, 2}));
}

TEST(Loader, ErrorsNameFileAndLine) {
  const auto dir = scratch_dir("corpus_err");
  minimal_fixture(dir);
  const auto passages = (dir / "passages.jsonl").string();
  write(passages, "{\"id\":\"p1\",\"text\":\"x\"}\n{\"id\":\"p1\",\"text\":\"y\"}\n");
  EXPECT_NE(error_of([&] { read_passages(passages); }).find(passages + ":2"), std::string::npos);
  write(passages, "{\"id\":\"p1\",\"text\":\"x\"}\nnot json\n");
  EXPECT_NE(error_of([&] { read_passages(passages); }).find(":2"), std::string::npos);
  write(passages, "{\"id\":\"p1\"}\n");
  EXPECT_NE(error_of([&] { read_passages(passages); }).find("text"), std::string::npos);

  const auto qrels = (dir / "qrels.tsv").string();
  write(qrels, "t1\tp1\t1\nt1\tp2\n");
  EXPECT_NE(error_of([&] { read_qrels(qrels); }).find(qrels + ":2"), std::string::npos);
  write(qrels, "t1\tp1\tx\n");
  EXPECT_FALSE(error_of([&] { read_qrels(qrels); }).empty());
  write(qrels, "t1\tp1\t-1\n");
  EXPECT_FALSE(error_of([&] { read_qrels(qrels); }).empty());

  const auto map = (dir / "domain_map.jsonl").string();
  write(map, "{\"task\":\"x\"}\n");
  EXPECT_FALSE(error_of([&] { read_domain_map(map); }).empty());
  write(map, "{\"domains\":[\"a\"]}\n{\"task\":\"x\",\"domains\":[\"b\"]}\n");
  EXPECT_NE(error_of([&] { read_domain_map(map); }).find(map + ":2"), std::string::npos);

  EXPECT_FALSE(error_of([&] { read_passages((dir / "missing.jsonl").string()); }).empty());
}

TEST(Loader, RejectsDanglingIdsAndBadLabels) {
  const auto dir = scratch_dir("corpus_dangling");
  const auto paths = minimal_fixture(dir);
  write(dir / "qrels.tsv", "t1\tp9\t1\n");
  EXPECT_NE(error_of([&] { load_dataset(paths); }).find("passage p9"), std::string::npos);
  write(dir / "qrels.tsv", "zz\tp1\t1\n");
  EXPECT_NE(error_of([&] { load_dataset(paths); }).find("query zz"), std::string::npos);
  write(dir / "qrels.tsv", "t1\tp1\t1\n");
  write(dir / "queries_test.jsonl", "{\"id\":\"e1\",\"text\":\"a\",\"task_label\":\"nope\"}\n");
  EXPECT_NE(error_of([&] { load_dataset(paths); }).find("e1(nope)"), std::string::npos);
  write(dir / "queries_test.jsonl", "{\"id\":\"e1\",\"text\":\"a\"}\n");
  EXPECT_NO_THROW(load_dataset(paths, false));
  EXPECT_NE(error_of([&] { load_dataset(paths, true); }).find("e1(unlabelled)"), std::string::npos);
  write(dir / "queries_test.jsonl", "{\"id\":\"t1\",\"text\":\"a\"}\n");
  EXPECT_NE(error_of([&] { load_dataset(paths); }).find("more than one"), std::string::npos);
}

TEST(Negatives, FileRoundTripAndValidation) {
  const auto dir = scratch_dir("corpus_neg");
  const auto paths = minimal_fixture(dir);
  write(dir / "negatives.tsv", "t1\tp2\n");
  auto d = load_dataset(paths);
  EXPECT_EQ(d.negatives.at("t1"), (std::vector<std::string>{"p2"}));
  EXPECT_EQ(format_negatives(d.negatives), "t1\tp2\n");
  const auto v = build_vocab(dataset_texts(d), 1);
  const auto data = make_training_data(d, d.train_queries, v, 8);
  ASSERT_EQ(data.examples.size(), 1u);
  EXPECT_EQ(data.examples[0].positive, 0u);
  EXPECT_EQ(data.examples[0].negatives, (std::vector<std::size_t>{1}));

  write(dir / "negatives.tsv", "t1\tp1\n");
  EXPECT_NE(error_of([&] { load_dataset(paths); }).find("both relevant and a negative"), std::string::npos);
  write(dir / "negatives.tsv", "t1\tp2\nt1\tp2\n");
  EXPECT_NE(error_of([&] { load_dataset(paths); }).find("repeated"), std::string::npos);
  write(dir / "negatives.tsv", "t1\tp2\textra\n");
  EXPECT_NE(error_of([&] { load_dataset(paths); }).find(":1"), std::string::npos);
}

TEST(Loader, WriteThenLoadIsIdempotent) {
  SyntheticSpec spec;
  spec.passages_per_domain = 20;
  spec.train_queries_per_domain = 6;
  spec.test_queries_per_domain = 3;
  spec.general_queries_per_passage = 1;
  const Dataset d = synthesize(spec);
  const auto a = scratch_dir("corpus_write_a"), b = scratch_dir("corpus_write_b");
  write_dataset(d, DatasetPaths::in_directory(a.string()));
  const Dataset back = load_dataset(DatasetPaths::in_directory(a.string()), true);
  EXPECT_EQ(back.passages, d.passages);
  EXPECT_EQ(back.train_queries, d.train_queries);
  EXPECT_EQ(back.general_queries, d.general_queries);
  EXPECT_EQ(back.qrels, d.qrels);
  EXPECT_EQ(back.negatives, d.negatives);
  write_dataset(back, DatasetPaths::in_directory(b.string()));
  for (const char* f : {"passages.jsonl", "queries_train.jsonl", "queries_test.jsonl", "queries_general.jsonl",
                        "qrels.tsv", "domain_map.jsonl", "negatives.tsv"}) {
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  }
}

TEST(Synthetic, DefaultCountsAndStructure) {
  const SyntheticSpec spec;
  const Dataset d = synthesize(spec);
  EXPECT_EQ(d.passages.size(), 300u);
  EXPECT_EQ(d.train_queries.size(), 90u);
  EXPECT_EQ(d.test_queries.size(), 30u);
  EXPECT_EQ(d.general_queries.size(), 300u * spec.general_queries_per_passage);
  EXPECT_EQ(d.domain_map.num_domains(), 3u);

  std::size_t multi = 0;
  std::set<std::string> gold_used;
  for (const auto* qs : {&d.train_queries, &d.test_queries}) {
    for (const auto& q : *qs) {
      const auto& judged = d.qrels.at(q.id);
      ASSERT_EQ(judged.size(), 1u);
      const auto& gold = judged.begin()->first;
      EXPECT_TRUE(gold_used.insert(gold).second) << gold;
      // Gold passage ids are p-<domain>-<n>; the label covers that domain.
      const std::size_t domain = static_cast<std::size_t>(gold[2] - '0');
      const auto& doms = d.domain_map.lookup(q.task_label);
      EXPECT_NE(std::find(doms.begin(), doms.end(), domain), doms.end()) << q.id;
      if (doms.size() > 1) ++multi;
    }
  }
  EXPECT_EQ(multi, 3u * (10 + 3));  // round(30/3) train and round(10/3) test per domain

  // Family negatives: the same passage slot in every other domain.
  for (const auto& q : d.train_queries) {
    const auto& gold = d.qrels.at(q.id).begin()->first;
    const auto& negs = d.negatives.at(q.id);
    ASSERT_EQ(negs.size(), 2u);
    for (const auto& n : negs) {
      EXPECT_NE(n.substr(0, 3), gold.substr(0, 3));
      EXPECT_EQ(n.substr(3), gold.substr(3));
    }
  }
  for (const auto& q : d.test_queries) EXPECT_FALSE(d.negatives.count(q.id));
}

TEST(Synthetic, DeterministicInSeed) {
  SyntheticSpec spec;
  spec.passages_per_domain = 40;
  const auto a = synthesize(spec), b = synthesize(spec);
  EXPECT_EQ(a.passages, b.passages);
  EXPECT_EQ(a.train_queries, b.train_queries);
  spec.seed = 2;
  EXPECT_NE(synthesize(spec).passages, a.passages);
}

TEST(Synthetic, ManifestRecordsChecksumsAndLexicalRecall) {
  const auto dir = scratch_dir("corpus_manifest");
  const SyntheticSpec spec;
  const auto m = generate_synthetic(spec, dir.string());
  EXPECT_EQ(m["seed"], 1);
  EXPECT_EQ(m["spec"], to_json(spec));
  EXPECT_GE(m["bag_of_words_recall_at_10"].get<double>(), 0.9);
  ASSERT_EQ(m["checksums"].size(), 7u);
  for (const auto& [file, sum] : m["checksums"].items()) {
    EXPECT_EQ(sum, file_checksum((dir / file).string())) << file;
  }
  EXPECT_EQ(slurp(dir / "manifest.json"), m.dump(2) + "\n");
  const auto again = scratch_dir("corpus_manifest2");
  generate_synthetic(spec, again.string());
  EXPECT_EQ(slurp(dir / "manifest.json"), slurp(again / "manifest.json"));
}

TEST(Synthetic, NoSharedWordsWithoutOverlap) {
  SyntheticSpec spec;
  spec.overlap_ratio = 0.0;
  spec.passages_per_domain = 20;
  spec.train_queries_per_domain = 5;
  spec.test_queries_per_domain = 5;
  const auto d = synthesize(spec);
  // Without a shared pool each passage's words are private to its domain.
  std::vector<std::set<std::string>> words(spec.num_domains);
  for (const auto& p : d.passages) {
    for (auto& w : split_words(p.text)) {
      if (w[0] == 'x' || w[0] == 'k') words[static_cast<std::size_t>(p.id[2] - '0')].insert(w);
    }
  }
  for (std::size_t a = 0; a < words.size(); ++a)
    for (std::size_t b = a + 1; b < words.size(); ++b)
      for (const auto& w : words[a]) EXPECT_FALSE(words[b].count(w)) << w;
  EXPECT_TRUE(d.negatives.empty());

  spec.num_domains = 1;
  EXPECT_THROW(synthesize(spec), DataError);  // multi-domain queries need a partner
  spec.multi_domain_fraction = 0.0;
  const auto one = synthesize(spec);
  EXPECT_EQ(one.passages.size(), 20u);
  EXPECT_EQ(one.domain_map.num_domains(), 1u);
}

TEST(Synthetic, SpecValidation) {
  SyntheticSpec s;
  s.overlap_ratio = 1.5;
  EXPECT_THROW(s.validate(), DataError);
  s = {};
  s.passages_per_domain = 10;
  EXPECT_THROW(s.validate(), DataError);
  s = {};
  s.signature_size = 4;
  EXPECT_THROW(s.validate(), DataError);
  s = {};
  s.topic_words = 9;
  EXPECT_THROW(s.validate(), DataError);
}
