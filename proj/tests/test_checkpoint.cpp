#include <gtest/gtest.h>

#include <fstream>

#include "repsteer/checkpoint.hpp"
#include "test_util.hpp"

using namespace repsteer;
using namespace repsteer::testing;

namespace {

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitExact) {
    TempDir dir("ck");
    const auto cfg = tiny_config();
    Checkpoint<float> ck;
    ck.weights = init_model<float>(cfg, 3);
    ck.adapter = random_adapter<float>(cfg, 4, 5);
    ck.role = Role::positive;
    ck.iteration = 2;
    ck.seed = 99;
    save_checkpoint(dir / "a", ck);
    const auto back = load_checkpoint<float>(dir / "a");
    EXPECT_EQ(back.weights, ck.weights);
    ASSERT_TRUE(back.adapter);
    EXPECT_EQ(*back.adapter, *ck.adapter);
    EXPECT_EQ(back.role, Role::positive);
    EXPECT_EQ(back.iteration, 2);
    EXPECT_EQ(back.seed, 99u);

    save_checkpoint(dir / "b", back);
    for (const char* f : {"manifest.json", "index.json", "tensors/tok_emb.bin", "tensors/lora.layer1.v.B.bin"})
        EXPECT_EQ(slurp(dir.path() / "a" / f), slurp(dir.path() / "b" / f)) << f;
}

TEST(Checkpoint, WidensFloatToDouble) {
    TempDir dir("ck");
    Checkpoint<float> ck;
    ck.weights = init_model<float>(tiny_config(), 3);
    save_checkpoint(dir / "a", ck);
    const auto d = load_checkpoint<double>(dir / "a");
    EXPECT_EQ(d.weights.cast<float>(), ck.weights);
    EXPECT_FALSE(d.adapter);
}

TEST(Checkpoint, RolesParse) {
    for (const auto r : {Role::base, Role::positive, Role::negative, Role::finetuned}) EXPECT_EQ(parse_role(role_name(r)), r);
    EXPECT_THROW(parse_role("guide"), CheckpointError);
}

TEST(Checkpoint, TamperedManifestRejected) {
    TempDir dir("ck");
    Checkpoint<float> ck;
    ck.weights = init_model<float>(tiny_config(), 3);
    save_checkpoint(dir / "a", ck);
    auto m = nlohmann::json::parse(slurp(dir.path() / "a" / "manifest.json"));
    m["config"]["d_ff"] = 64;
    std::ofstream(dir.path() / "a" / "manifest.json") << m.dump();
    EXPECT_THROW(load_checkpoint<float>(dir / "a"), CheckpointError);
    EXPECT_THROW(load_checkpoint<float>(dir / "missing"), CheckpointError);
}

TEST(Checkpoint, TruncatedTensorRejected) {
    TempDir dir("ck");
    Checkpoint<float> ck;
    ck.weights = init_model<float>(tiny_config(), 3);
    save_checkpoint(dir / "a", ck);
    const auto p = dir.path() / "a" / "tensors" / "w_out.bin";
    std::filesystem::resize_file(p, std::filesystem::file_size(p) - 4);
    EXPECT_THROW(load_checkpoint<float>(dir / "a"), CheckpointError);
}

TEST(Checkpoint, ArchitectureMismatchNamesBothSides) {
    auto a = tiny_config(), b = tiny_config();
    b.d_model = 32;
    try {
        require_same_architecture(a, b, "positive guidance");
        FAIL() << "expected CheckpointError";
    } catch (const CheckpointError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("d_model=32"), std::string::npos);
        EXPECT_NE(msg.find("d_model=16"), std::string::npos);
        EXPECT_NE(msg.find(a.fingerprint()), std::string::npos);
    }
    EXPECT_NO_THROW(require_same_architecture(a, a, "x"));
}
