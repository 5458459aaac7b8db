#include <gtest/gtest.h>

#include <sstream>

#include "scns/config.hpp"
#include "scns/word_embeddings.hpp"

using namespace scns;

namespace {

std::size_t error_line(const std::string& text) {
  try {
    parse_config_text(text);
  } catch (const ParseError& e) {
    return e.line();
  }
  ADD_FAILURE() << "no ParseError for:\n" << text;
  return 0;
}

std::string error_text(const std::string& text) {
  try {
    parse_config_text(text);
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Config, EmptyFileNeedsSeed) {
  EXPECT_NE(error_text("").find("seed missing"), std::string::npos);
  EXPECT_NE(error_text("# nothing but a comment\n").find("seed missing"), std::string::npos);
}

TEST(Config, SeedOnlyGivesDefaults) {
  const auto c = parse_config_text("seed = 3\n");
  EXPECT_EQ(c.seed, std::optional<std::uint64_t>(3));
  EXPECT_EQ(c.dataset.classes, 10u);
  EXPECT_EQ(c.optimizer.momentum, 0.9);
  EXPECT_EQ(c.optimizer.weight_decay, 5e-4);
  EXPECT_EQ(c.memory.gamma, 0.5);
  EXPECT_EQ(c.memory.tau, 0.07);
  EXPECT_EQ(c.model.hidden, (std::vector<std::size_t>{64, 64}));
}

TEST(Config, SeedOverride) {
  EXPECT_EQ(parse_config_text("", 9).seed, std::optional<std::uint64_t>(9));
  EXPECT_EQ(parse_config_text("seed = 1\n", 9).seed, std::optional<std::uint64_t>(9));
}

TEST(Config, RangeErrorNamesKeyAndLine) {
  const std::string text = "seed = 1\n[loss]\n\nalpha = 1.5\n";
  const std::string msg = error_text(text);
  EXPECT_NE(msg.find("[loss].alpha"), std::string::npos) << msg;
  EXPECT_NE(msg.find("line 4"), std::string::npos) << msg;
  EXPECT_EQ(error_line(text), 4u);
}

TEST(Config, UnknownKeyAndSectionAreRejected) {
  EXPECT_EQ(error_line("seed = 1\n[loss]\nalpah = 0.5\n"), 3u);
  EXPECT_NE(error_text("seed = 1\n[loss]\nalpah = 0.5\n").find("[loss].alpah"), std::string::npos);
  EXPECT_EQ(error_line("seed = 1\n[losses]\n"), 2u);
  EXPECT_EQ(error_line("[dataset]\nseed = 1\n"), 2u);  // seed lives at top level
}

TEST(Config, TypeMismatchCitesLine) {
  const std::string text = "seed = 1\n[dataset]\nclasses = ten\n";
  EXPECT_EQ(error_line(text), 3u);
  EXPECT_NE(error_text(text).find("[dataset].classes expects"), std::string::npos);
  EXPECT_EQ(error_line("seed = 1\n[sampler]\nvariant = random\n"), 3u);
  EXPECT_EQ(error_line("seed = -1\n"), 1u);
  EXPECT_EQ(error_line("seed = 1\n[optimizer]\nlr = 0.1x\n"), 3u);
  EXPECT_EQ(error_line("seed = 1\n[model]\nadapter = yes\n"), 3u);
}

TEST(Config, DuplicateKeyAndMalformedLines) {
  EXPECT_EQ(error_line("seed = 1\n[loss]\nalpha = 0.1\nalpha = 0.2\n"), 4u);
  EXPECT_EQ(error_line("seed = 1\n[loss\n"), 2u);
  EXPECT_EQ(error_line("seed = 1\njust words\n"), 2u);
}

TEST(Config, ParsesEveryKind) {
  const auto c = parse_config_text(
      "seed = 5\n"
      "[dataset]\nclass_names = cat|pickup truck\n"
      "[sampler]\nvariant = instance\nk = 7\n"
      "[loss]\nsimilarity = cka\nbeta = 0.25\n"
      "[optimizer]\ndecay_epochs = 10, 20\n"
      "[model]\nhidden =\nadapter = true\n"
      "[convergence]\nvariants = class,uniform\n"
      "[theory]\nprobs = 0.5,0.25,0.25\n");
  EXPECT_EQ(c.dataset.class_names, (std::vector<std::string>{"cat", "pickup truck"}));
  EXPECT_EQ(c.sampler.variant, SamplerVariant::InstanceScns);
  EXPECT_EQ(c.sampler.k, 7u);
  EXPECT_EQ(c.loss.similarity, KdSimilarity::Cka);
  EXPECT_EQ(c.optimizer.decay_epochs, (std::vector<std::size_t>{10, 20}));
  EXPECT_TRUE(c.model.hidden.empty());
  EXPECT_TRUE(c.model.adapter);
  EXPECT_EQ(c.convergence.variants,
            (std::vector<SamplerVariant>{SamplerVariant::ClassScns, SamplerVariant::Uniform}));
  EXPECT_EQ(c.theory.probs, (std::vector<double>{0.5, 0.25, 0.25}));
}

// serialize(parse(f)) is the canonical form of f: stable under a second pass
// and carrying every value exactly.
TEST(Config, RoundTrip) {
  const std::string text =
      "# comment\nseed = 11\n[loss]\nalpha = 0.1\ngamma_plus = 0.30000000000000004\n"
      "[dataset]\nseparation = 2.5\nclass_names = a|b c\n[optimizer]\ndecay_epochs = 3,6\n";
  const auto first = parse_config_text(text);
  const std::string canon = serialize_config(first);
  const auto second = parse_config_text(canon);
  EXPECT_EQ(serialize_config(second), canon);
  EXPECT_EQ(second.loss.gamma_plus, 0.30000000000000004);
  EXPECT_EQ(second.loss.alpha, 0.1);
  EXPECT_EQ(second.dataset.class_names, first.dataset.class_names);
  EXPECT_NE(canon.find("alpha = 0.1\n"), std::string::npos);
  EXPECT_EQ(canon.rfind("seed = 11\n", 0), 0u);
}

TEST(WordEmbeddings, CopiesSingleTokenRows) {
  std::stringstream ss("2 3\ncat 1 2 3\ndog -1 0.5 4\n");
  const auto m = label_embeddings(read_word_vectors(ss), {"dog", "cat"});
  EXPECT_EQ(m, (Matrix{{-1.0, 0.5, 4.0}, {1.0, 2.0, 3.0}}));
}

TEST(WordEmbeddings, AveragesPhrases) {
  std::stringstream ss("3 2\npickup 1 3\ntruck 3 -1\ncar 0 0\n");
  const auto m = label_embeddings(read_word_vectors(ss), {"pickup truck"});
  EXPECT_EQ(m, (Matrix{{2.0, 1.0}}));
}

TEST(WordEmbeddings, MalformedDimCitesLine) {
  std::stringstream ss("6 2\na 1 2\nb 1 2\nc 1 2\nd 1 2\ne 1 2\nf 1 2 3\n");
  try {
    read_word_vectors(ss);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 7u);
    EXPECT_NE(std::string(e.what()).find("line 7"), std::string::npos);
  }
}

TEST(WordEmbeddings, ListsAllMissingTokens) {
  std::stringstream ss("1 2\ncat 1 2\n");
  try {
    label_embeddings(read_word_vectors(ss), {"cat", "pickup truck"});
    FAIL() << "expected Error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("pickup, truck"), std::string::npos) << e.what();
  }
}

TEST(WordEmbeddings, HeaderCountAndDuplicates) {
  std::stringstream short_file("3 1\na 1\nb 2\n");
  EXPECT_THROW(read_word_vectors(short_file), ParseError);
  std::stringstream dup("2 1\na 1\na 2\n");
  try {
    read_word_vectors(dup);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
  std::stringstream bad_header("2\n");
  EXPECT_THROW(read_word_vectors(bad_header), ParseError);
}
