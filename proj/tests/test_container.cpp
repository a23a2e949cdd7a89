// SPDX-License-Identifier: Apache-2.0

#include "mlprune/container.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

using namespace mlprune;
using Catch::Matchers::ContainsSubstring;

namespace {

std::string with_header(const std::string & json, const std::string & data = {}) {
    std::string out;
    detail::put_u64_le(out, json.size());
    return out + json + data;
}

Container random_container(Rng & rng) {
    Container         c;
    const std::size_t n_meta = rng.below(4);
    for (std::size_t i = 0; i < n_meta; ++i) {
        c.metadata["key" + std::to_string(rng.below(100))] = "value " + std::to_string(rng.next());
    }
    const std::size_t n = rng.below(6);
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<std::size_t> shape;
        const std::size_t        rank = rng.below(4);
        for (std::size_t d = 0; d < rank; ++d) {
            shape.push_back(rng.below(5));
        }
        TensorRecord r{"t" + std::to_string(i) + "/" + std::to_string(rng.below(1000)), shape, {}};
        r.data.resize(r.numel());
        for (auto & v : r.data) {
            v = static_cast<float>(rng.normal() * 100.0);
        }
        c.records.push_back(std::move(r));
    }
    return c;
}

} // namespace

TEST_CASE("empty container is a length prefix and a minimal header", "[container]") {
    const std::string bytes = serialize(Container{});
    const auto        hlen  = detail::get_u64_le(bytes);
    CHECK(bytes.size() == 8 + hlen);
    CHECK(hlen % 8 == 0);
    const Container back = parse(bytes);
    CHECK(back.records.empty());
    CHECK(back.metadata.empty());
}

TEST_CASE("2x2 zero tensor has a 16-byte zero data section", "[container]") {
    Container c;
    c.add("w", {2, 2}, std::vector<float>(4, 0.0f));
    const std::string bytes = serialize(c);
    const auto        hlen  = detail::get_u64_le(bytes);
    REQUIRE(bytes.size() == 8 + hlen + 16);
    CHECK(bytes.substr(8 + hlen) == std::string(16, '\0'));
}

TEST_CASE("header lists tensors with F32 dtype, shape and offsets", "[container]") {
    Container c;
    c.metadata["b"] = "2";
    c.metadata["a"] = "1";
    c.add("z", {3}, {1, 2, 3});
    c.add("y", {1, 2}, {4, 5});
    const std::string bytes  = serialize(c);
    const auto        hlen   = detail::get_u64_le(bytes);
    const auto        header = nlohmann::json::parse(bytes.substr(8, hlen));
    CHECK(header["z"]["dtype"] == "F32");
    CHECK(header["z"]["shape"] == nlohmann::json::array({3}));
    CHECK(header["z"]["data_offsets"] == nlohmann::json::array({0, 12}));
    CHECK(header["y"]["data_offsets"] == nlohmann::json::array({12, 20}));
    CHECK(header["__metadata__"]["a"] == "1");
    CHECK(header["__metadata__"]["format_version"] == "1");
    // sorted keys
    const std::string text(bytes.substr(8, hlen));
    CHECK(text.find("\"__metadata__\"") < text.find("\"y\""));
    CHECK(text.find("\"y\"") < text.find("\"z\""));
}

TEST_CASE("save/load round trip over random containers", "[container][property]") {
    Rng rng(7);
    for (int i = 0; i < 100; ++i) {
        const Container   c     = random_container(rng);
        const std::string bytes = serialize(c);
        const Container   back  = parse(bytes);
        REQUIRE(back == c);
        REQUIRE(serialize(back) == bytes);
    }
}

TEST_CASE("save and load through the filesystem", "[container]") {
    std::filesystem::create_directories(MLPRUNE_TEST_TMP);
    const auto path = std::filesystem::path(MLPRUNE_TEST_TMP) / "c.safetensors";
    Container  c;
    c.metadata["k"] = "v";
    c.add("a", {2}, {1.5f, -2.0f});
    save(c, path);
    CHECK(load(path) == c);
    CHECK_THROWS_AS(load(path.string() + ".missing"), Error);
}

TEST_CASE("serialize rejects invalid records", "[container]") {
    Container dup;
    dup.add("a", {1}, {1});
    dup.add("a", {1}, {2});
    CHECK_THROWS_WITH(serialize(dup), ContainsSubstring("duplicate"));

    Container bad;
    bad.add("a", {2, 2}, {1, 2, 3});
    CHECK_THROWS_WITH(serialize(bad), ContainsSubstring("does not match shape"));

    Container reserved;
    reserved.metadata["format_version"] = "1";
    CHECK_THROWS_AS(serialize(reserved), Error);
}

TEST_CASE("load rejects corrupt files", "[container]") {
    SECTION("header length exceeds file size") {
        std::string bytes;
        detail::put_u64_le(bytes, 1000);
        bytes += "{}";
        CHECK_THROWS_WITH(parse(bytes), ContainsSubstring("truncated"));
    }
    SECTION("missing length prefix") {
        CHECK_THROWS_WITH(parse("abc"), ContainsSubstring("truncated"));
    }
    SECTION("valid minimal file") {
        CHECK(parse(with_header("{}")).records.empty());
    }
    SECTION("offset beyond data section") {
        const auto bytes = with_header(R"({"a":{"dtype":"F32","shape":[2],"data_offsets":[8,16]}})", std::string(8, '\0'));
        CHECK_THROWS_WITH(parse(bytes), ContainsSubstring("out-of-bounds extent"));
    }
    SECTION("overlapping extents") {
        const auto bytes = with_header(R"({"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[2],"data_offsets":[4,12]}})", std::string(12, '\0'));
        CHECK_THROWS_WITH(parse(bytes), ContainsSubstring("overlapping"));
    }
    SECTION("unknown dtype") {
        const auto bytes = with_header(R"({"a":{"dtype":"F16","shape":[2],"data_offsets":[0,4]}})", std::string(4, '\0'));
        CHECK_THROWS_WITH(parse(bytes), ContainsSubstring("unknown dtype"));
    }
    SECTION("version mismatch") {
        CHECK_THROWS_WITH(parse(with_header(R"({"__metadata__":{"format_version":"2"}})")), ContainsSubstring("version mismatch"));
    }
    SECTION("extent size disagrees with shape") {
        const auto bytes = with_header(R"({"a":{"dtype":"F32","shape":[3],"data_offsets":[0,8]}})", std::string(8, '\0'));
        CHECK_THROWS_AS(parse(bytes), Error);
    }
    SECTION("trailing bytes") {
        const auto bytes = with_header(R"({"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}})", std::string(8, '\0'));
        CHECK_THROWS_WITH(parse(bytes), ContainsSubstring("trailing"));
    }
    SECTION("malformed JSON") {
        CHECK_THROWS_WITH(parse(with_header("{\"a\":")), ContainsSubstring("malformed"));
        CHECK_THROWS_WITH(parse(with_header("[1,2]")), ContainsSubstring("malformed"));
        CHECK_THROWS_AS(parse(with_header(R"({"__metadata__":{"k":1}})")), Error);
        CHECK_THROWS_AS(parse(with_header(R"({"a":{"dtype":"F32","shape":[-1],"data_offsets":[0,0]}})")), Error);
    }
}

TEST_CASE("foreign header ordering and padding load correctly", "[container]") {
    // Unsorted keys, data laid out in reverse key order, no padding.
    std::string data;
    detail::put_f32_le(data, std::vector<float>{3.0f});
    detail::put_f32_le(data, std::vector<float>{1.0f, 2.0f});
    const auto bytes = with_header(R"({"b":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"__metadata__":{"x":"y"},"a":{"shape":[2],"dtype":"F32","data_offsets":[4,12]}})", data);
    const auto c     = parse(bytes);
    REQUIRE(c.records.size() == 2);
    CHECK(c.records[0].name == "b");
    CHECK(c.at("a").data == std::vector<float>{1.0f, 2.0f});
    CHECK(c.meta("x") == "y");
}

TEST_CASE("truncations and bit flips yield errors, not crashes", "[container][fuzz]") {
    Rng       rng(99);
    Container c;
    c.metadata["languages"] = "en,de";
    c.add("a", {3, 2}, {1, 2, 3, 4, 5, 6});
    c.add("b", {4}, {7, 8, 9, 10});
    const std::string good = serialize(c);

    std::size_t rejected = 0;
    for (std::size_t cut = 0; cut < good.size(); ++cut) {
        try {
            (void)parse(std::string_view(good).substr(0, cut));
        } catch (const Error &) {
            ++rejected;
        }
    }
    CHECK(rejected == good.size());

    for (int i = 0; i < 5000; ++i) {
        std::string bad = good;
        const int   flips = 1 + static_cast<int>(rng.below(3));
        for (int f = 0; f < flips; ++f) {
            bad[rng.below(bad.size())] ^= static_cast<char>(1U << rng.below(8));
        }
        try {
            (void)parse(bad);
        } catch (const Error &) {
        }
    }
}
