#include <doctest.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <regex>
#include <set>
#include <string>
#include <vector>

#include "longtail/common.hpp"
#include "longtail/rng.hpp"

using namespace longtail;

namespace {

// Reference FNV-1a, written independently from the library's version.
uint64_t fnv_ref(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_SUITE("common") {
  TEST_CASE("fnv1a matches published vectors") {
    CHECK(fnv1a("") == 0xcbf29ce484222325ull);
    CHECK(fnv1a("a") == 0xaf63dc4c8601ec8cull);
    CHECK(fnv1a("foobar") == 0x85944171f73967e8ull);
  }

  TEST_CASE("fnv1a agrees with a reference implementation") {
    for (const char* s : {"", "x", "red dress", "the quick brown fox", "\n\t\xff\x01"})
      CHECK(fnv1a(s) == fnv_ref(s));
  }

  TEST_CASE("fnv1a state chains across pieces") {
    const std::string whole = "abcdef";
    for (size_t cut = 0; cut <= whole.size(); ++cut) {
      const uint64_t part = fnv1a(whole.substr(cut), fnv1a(whole.substr(0, cut)));
      CHECK(part == fnv1a(whole));
    }
  }

  TEST_CASE("hex64 prints 16 lowercase hex digits") {
    CHECK(hex64(0) == "0000000000000000");
    CHECK(hex64(0xcbf29ce484222325ull) == "cbf29ce484222325");
    CHECK(hex64(0xffffffffffffffffull) == "ffffffffffffffff");
    CHECK(hex64(1) == "0000000000000001");
  }

  TEST_CASE("join") {
    CHECK(join({}, ", ") == "");
    CHECK(join({"a"}, ", ") == "a");
    CHECK(join({"a", "b", "c"}, " | ") == "a | b | c");
    CHECK(join({"", ""}, "-") == "-");
  }

  TEST_CASE("file round-trip and existence") {
    const std::string path = temp_path("longtail_common_rt.txt");
    std::filesystem::remove(path);
    CHECK_FALSE(file_exists(path));
    write_file_atomic(path, "line one\nline two\n");
    CHECK(file_exists(path));
    CHECK(read_file(path) == "line one\nline two\n");
    const auto lines = read_lines(path);
    REQUIRE(lines.size() == 2);
    CHECK(lines[0] == "line one");
    CHECK(lines[1] == "line two");
    std::filesystem::remove(path);
  }

  TEST_CASE("write_file_atomic replaces existing content completely") {
    const std::string path = temp_path("longtail_common_replace.txt");
    write_file_atomic(path, "a much longer original body of text");
    write_file_atomic(path, "short");
    CHECK(read_file(path) == "short");
    std::filesystem::remove(path);
  }

  TEST_CASE("hash_file equals fnv1a of the content") {
    const std::string path = temp_path("longtail_common_hash.bin");
    const std::string body = "some bytes\x00with a nul";
    write_file_atomic(path, body);
    CHECK(hash_file(path) == fnv1a(body));
    std::filesystem::remove(path);
  }

  TEST_CASE("utc_timestamp shape") {
    const std::string ts = utc_timestamp();
    std::regex shape(R"(^\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}Z$)");
    CHECK(std::regex_match(ts, shape));
  }
}

TEST_SUITE("rng") {
  TEST_CASE("same seed, same stream") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  }

  TEST_CASE("different seeds diverge") {
    Rng a(1), b(2);
    int same = 0;
    for (int i = 0; i < 64; ++i)
      if (a.next_u64() == b.next_u64()) ++same;
    CHECK(same == 0);
  }

  TEST_CASE("uniform01 stays in [0, 1)") {
    Rng r(7);
    for (int i = 0; i < 10000; ++i) {
      const double x = r.uniform01();
      CHECK(x >= 0.0);
      CHECK(x < 1.0);
    }
  }

  TEST_CASE("uniform_int covers its inclusive range") {
    Rng r(3);
    std::set<int> seen;
    for (int i = 0; i < 2000; ++i) {
      const int v = r.uniform_int(2, 6);
      CHECK(v >= 2);
      CHECK(v <= 6);
      seen.insert(v);
    }
    CHECK(seen.size() == 5);
  }

  TEST_CASE("uniform_index bounds") {
    Rng r(11);
    for (int i = 0; i < 1000; ++i) CHECK(r.uniform_index(13) < 13);
    for (int i = 0; i < 100; ++i) CHECK(r.uniform_index(1) == 0);
  }

  TEST_CASE("shuffle permutes") {
    Rng r(5);
    std::vector<int> v(30);
    for (int i = 0; i < 30; ++i) v[i] = i;
    auto sorted = v;
    r.shuffle(v);
    CHECK(v != sorted);  // 30! arrangements; identity would be astonishing
    auto back = v;
    std::sort(back.begin(), back.end());
    CHECK(back == sorted);
  }

  TEST_CASE("normal looks like a unit normal") {
    Rng r(9);
    double sum = 0.0, sq = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
      const double x = r.normal();
      sum += x;
      sq += x * x;
    }
    const double mean = sum / n;
    const double var = sq / n - mean * mean;
    CHECK(std::fabs(mean) < 0.05);
    CHECK(std::fabs(var - 1.0) < 0.1);
  }

  TEST_CASE("normal honors mean and stddev") {
    Rng r(4);
    double sum = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) sum += r.normal(3.0, 0.5);
    CHECK(std::fabs(sum / n - 3.0) < 0.05);
  }
}
