#include <catch2/catch_amalgamated.hpp>

#include "apptool/bootparam.hpp"
#include "testutil.hpp"

using namespace apptool::bootparam;
using apptool::Error;

TEST_CASE("encode: empty params give an empty command line") {
  CHECK(encode(BootParams{}) == "");
}

TEST_CASE("encode: values are percent-encoded") {
  BootParams p;
  p.set(keys::jobcmd, "echo hello world");
  CHECK(encode(p) == "apppot.jobcmd=echo%20hello%20world");
  // round-trip oracle
  CHECK(decode(encode(p)).params == p);
}

TEST_CASE("encode: passthrough tokens come after all pairs, in order") {
  BootParams p;
  p.set(keys::changes, "/tmp/c.changes.tar.gz");
  p.passthrough = {"mem=512M", "root=/dev/ubda"};
  CHECK(encode(p) == "apppot.changes=/tmp/c.changes.tar.gz mem=512M root=/dev/ubda");
  CHECK(decode(encode(p)).params == p);
}

TEST_CASE("encode: bad input is refused") {
  BootParams p;
  p.pairs.emplace_back("apppot.UPPER", "x");
  CHECK_THROWS_AS(encode(p), Error);

  BootParams q;
  q.pairs.emplace_back("apppot.a", "1");
  q.pairs.emplace_back("apppot.a", "2");
  CHECK_THROWS_AS(encode(q), Error);

  BootParams r;
  r.passthrough = {"has space"};
  CHECK_THROWS_AS(encode(r), Error);

  BootParams s;
  s.passthrough = {""};
  CHECK_THROWS_AS(encode(s), Error);

  BootParams t;
  t.pairs.emplace_back("notapppot.key", "x");
  CHECK_THROWS_AS(encode(t), Error);
}

TEST_CASE("decode: empty command line") {
  Decoded d = decode("");
  CHECK(d.params.pairs.empty());
  CHECK(d.params.passthrough.empty());
}

TEST_CASE("decode: prefix isolation between pairs and passthrough") {
  Decoded d = decode("root=/dev/ubda apppot.uid=1000 apppot.gid=1000 con=null");
  REQUIRE(d.params.pairs.size() == 2);
  CHECK(*d.params.get(keys::uid) == "1000");
  CHECK(*d.params.get(keys::gid) == "1000");
  CHECK(d.params.passthrough == std::vector<std::string>{"root=/dev/ubda", "con=null"});
}

TEST_CASE("decode: percent escapes in values") {
  Decoded d = decode("apppot.jobcmd=a%3Db");
  CHECK(*d.params.get(keys::jobcmd) == "a=b");
}

TEST_CASE("decode: duplicate key keeps the last occurrence and warns") {
  Decoded d = decode("apppot.tag=one apppot.tag=two");
  REQUIRE(d.params.pairs.size() == 1);
  CHECK(*d.params.get(keys::tag) == "two");
  REQUIRE(d.warnings.size() == 1);
  CHECK(d.warnings[0].find("apppot.tag") != std::string::npos);
}

TEST_CASE("decode: malformed percent escape names the token") {
  CHECK_THROWS_WITH(decode("apppot.jobcmd=bad%2"), Catch::Matchers::ContainsSubstring("bad%2"));
  CHECK_THROWS_AS(decode("apppot.jobcmd=bad%zz"), Error);
}

TEST_CASE("decode: tokens with invalid apppot keys stay passthrough") {
  Decoded d = decode("apppot.NOPE=x apppot.=y apppot.ok=z");
  CHECK(d.params.pairs.size() == 1);
  CHECK(*d.params.get("apppot.ok") == "z");
  CHECK(d.params.passthrough == std::vector<std::string>{"apppot.NOPE=x", "apppot.=y"});
}

TEST_CASE("decode: whitespace runs separate tokens") {
  Decoded d = decode("  con=null\t\tapppot.uid=7 \n quiet ");
  CHECK(d.params.pairs.size() == 1);
  CHECK(d.params.passthrough == std::vector<std::string>{"con=null", "quiet"});
}

TEST_CASE("round-trip: decode(encode(p)) == p over randomized params") {
  std::mt19937_64 rng(20120306);
  for (int i = 0; i < 10000; ++i) {
    BootParams p = testutil::random_bootparams(rng);
    Decoded d = decode(encode(p));
    // decode(encode(p)) == p also witnesses injectivity of encode on
    // well-formed params: decode is a left inverse.
    REQUIRE(d.params == p);
    REQUIRE(d.warnings.empty());
  }
}
