#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "residscope/config.hpp"
#include "residscope/dataset.hpp"
#include "residscope/model.hpp"
#include "residscope/safetensors.hpp"
#include "residscope/sweep.hpp"
#include "residscope/synthetic.hpp"
#include "support/fixtures.hpp"

using namespace residscope;
using nlohmann::json;

namespace {

std::filesystem::path temp_path(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("residscope_io_" + name);
}

void write_file(const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    out << text;
}

std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// hand-rolled safetensors writer, independent of the library's serializer
std::string build_safetensors(const std::vector<std::pair<std::string, std::pair<
                                  std::vector<int64_t>, std::vector<float>>>>& tensors,
                              const std::string& dtype = "F32") {
    json header = json::object();
    std::string blob;
    for (const auto& [name, t] : tensors) {
        const auto& [shape, data] = t;
        const size_t begin = blob.size();
        blob.append(reinterpret_cast<const char*>(data.data()), data.size() * sizeof(float));
        header[name] = {{"dtype", dtype},
                        {"shape", shape},
                        {"data_offsets", {begin, blob.size()}}};
    }
    const std::string htext = header.dump();
    std::string out;
    uint64_t len = htext.size();
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((len >> (8 * i)) & 0xff));
    out += htext;
    out += blob;
    return out;
}

}  // namespace

TEST_CASE("model config JSON round trip") {
    const auto cfg = fixtures::tiny_config(3, 16, 4, 2, 32, 100);
    const auto text = model_config_to_json_text(cfg);
    const auto back = model_config_from_json_text(text);
    CHECK(back.num_layers == cfg.num_layers);
    CHECK(back.hidden_dim == cfg.hidden_dim);
    CHECK(back.num_heads == cfg.num_heads);
    CHECK(back.num_kv_heads == cfg.num_kv_heads);
    CHECK(back.ff_dim == cfg.ff_dim);
    CHECK(back.vocab_size == cfg.vocab_size);
    CHECK(back.rope_theta == cfg.rope_theta);
    CHECK(back.norm_eps == cfg.norm_eps);
    CHECK(back.max_seq_len == cfg.max_seq_len);

    const auto path = temp_path("config.json");
    save_model_config(cfg, path.string());
    const auto loaded = load_model_config(path.string());
    CHECK(loaded.hidden_dim == cfg.hidden_dim);
    std::filesystem::remove(path);
}

TEST_CASE("model config validation rejects inconsistent shapes") {
    auto cfg = fixtures::tiny_config();
    cfg.num_heads = 3;  // hidden_dim 8 not divisible
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
    cfg = fixtures::tiny_config();
    cfg.num_kv_heads = 3;  // heads 2 not divisible by kv heads
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
    cfg = fixtures::tiny_config();
    cfg.vocab_size = 0;
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
    CHECK_THROWS_AS(model_config_from_json_text("{"), ValidationError);
    CHECK_THROWS_AS(model_config_from_json_text("{\"num_layers\": 2}"), ValidationError);
    CHECK_THROWS_AS(load_model_config("/nonexistent/config.json"), IoError);
}

TEST_CASE("weights survive a save/load round trip bit-exactly") {
    const auto cfg = fixtures::tiny_config(2, 8, 2, 1, 16, 24);
    const auto w = random_weights(cfg, 5);
    const auto path = temp_path("roundtrip.safetensors");
    save_weights(w, cfg, path.string());
    const auto back = load_weights(path.string(), cfg);
    CHECK(back.embedding.data == w.embedding.data);
    CHECK(back.unembedding.data == w.unembedding.data);
    for (int l = 0; l < cfg.num_layers; ++l) {
        CHECK(back.layers[l].wq.data == w.layers[l].wq.data);
        CHECK(back.layers[l].wo.data == w.layers[l].wo.data);
        CHECK(back.layers[l].down.data == w.layers[l].down.data);
        CHECK(back.layers[l].attn_norm == w.layers[l].attn_norm);
    }
    CHECK(back.final_norm == w.final_norm);
    std::filesystem::remove(path);
}

TEST_CASE("omitting the unembedding ties it to the embedding on load") {
    const auto cfg = fixtures::tiny_config();
    const auto w = random_weights(cfg, 6);
    const auto path = temp_path("tied.safetensors");
    save_weights(w, cfg, path.string(), true);
    const auto back = load_weights(path.string(), cfg);
    CHECK(back.unembedding.data == w.embedding.data);
    std::filesystem::remove(path);
}

TEST_CASE("vocab mismatch errors name the embedding tensor") {
    auto cfg = fixtures::tiny_config(1, 4, 1, 1, 8, 4);
    const auto w = random_weights(cfg, 7);
    const auto path = temp_path("mismatch.safetensors");
    save_weights(w, cfg, path.string());
    cfg.vocab_size = 5;
    CHECK_THROWS_WITH_AS(load_weights(path.string(), cfg),
                         doctest::Contains("embed_tokens"), IoError);
    std::filesystem::remove(path);
}

TEST_CASE("a hand-built checkpoint file reads back exactly and runs") {
    // 1 layer, d=2, 1 head, vocab 4, ff 2 — every tensor written by hand
    auto cfg = fixtures::tiny_config(1, 2, 1, 1, 2, 4);
    using T = std::pair<std::vector<int64_t>, std::vector<float>>;
    const std::vector<std::pair<std::string, T>> tensors{
        {"model.embed_tokens.weight", T{{4, 2}, {0.1f, 0.2f, 0.3f, 0.4f, 0.5f, 0.6f, 0.7f, 0.8f}}},
        {"model.layers.0.self_attn.q_proj.weight", T{{2, 2}, {1, 0, 0, 1}}},
        {"model.layers.0.self_attn.k_proj.weight", T{{2, 2}, {0, 1, 1, 0}}},
        {"model.layers.0.self_attn.v_proj.weight", T{{2, 2}, {0.5f, 0, 0, 0.5f}}},
        {"model.layers.0.self_attn.o_proj.weight", T{{2, 2}, {1, 1, 0, 1}}},
        {"model.layers.0.mlp.gate_proj.weight", T{{2, 2}, {0.2f, -0.2f, 0.4f, 0.1f}}},
        {"model.layers.0.mlp.up_proj.weight", T{{2, 2}, {1, 0.5f, -0.5f, 1}}},
        {"model.layers.0.mlp.down_proj.weight", T{{2, 2}, {0.3f, 0, 0, 0.3f}}},
        {"model.layers.0.input_layernorm.weight", T{{2}, {1, 1}}},
        {"model.layers.0.post_attention_layernorm.weight", T{{2}, {1, 1}}},
        {"model.norm.weight", T{{2}, {1, 1}}},
        {"lm_head.weight", T{{4, 2}, {1, 0, 0, 1, 1, 1, -1, 1}}},
    };
    const auto path = temp_path("handmade.safetensors");
    write_file(path, build_safetensors(tensors));

    const auto w = load_weights(path.string(), cfg);
    CHECK(w.embedding.at(2, 1) == 0.6f);
    CHECK(w.layers[0].wq.at(0, 0) == 1.0f);
    CHECK(w.layers[0].wk.at(0, 1) == 1.0f);
    CHECK(w.unembedding.at(3, 0) == -1.0f);

    const Model model{cfg, w};
    const auto res = forward(model, std::vector<int>{1, 3});
    CHECK(res.logits.size() == 4);
    std::filesystem::remove(path);
}

TEST_CASE("weight loading errors are structured and name the problem") {
    auto cfg = fixtures::tiny_config(1, 2, 1, 1, 2, 4);

    SUBCASE("missing tensor is named") {
        using T = std::pair<std::vector<int64_t>, std::vector<float>>;
        const std::vector<std::pair<std::string, T>> only_embed{
            {"model.embed_tokens.weight", T{{4, 2}, std::vector<float>(8, 0.0f)}}};
        const auto path = temp_path("missing.safetensors");
        write_file(path, build_safetensors(only_embed));
        CHECK_THROWS_WITH_AS(load_weights(path.string(), cfg),
                             doctest::Contains("q_proj"), IoError);
        std::filesystem::remove(path);
    }
    SUBCASE("unknown dtype is rejected") {
        using T = std::pair<std::vector<int64_t>, std::vector<float>>;
        const std::vector<std::pair<std::string, T>> tensors{
            {"model.embed_tokens.weight", T{{4, 2}, std::vector<float>(8, 0.0f)}}};
        const auto path = temp_path("dtype.safetensors");
        write_file(path, build_safetensors(tensors, "F64"));
        CHECK_THROWS_WITH_AS(load_weights(path.string(), cfg), doctest::Contains("F64"),
                             IoError);
        std::filesystem::remove(path);
    }
    SUBCASE("truncated file is rejected") {
        const auto path = temp_path("trunc.safetensors");
        write_file(path, std::string("\x08\0\0\0", 4));
        CHECK_THROWS_AS(load_weights(path.string(), cfg), IoError);
        std::filesystem::remove(path);
    }
    SUBCASE("nonexistent path is an I/O error") {
        CHECK_THROWS_AS(load_weights("/nonexistent/w.safetensors", cfg), IoError);
    }
}

TEST_CASE("the published checkpoint header parses when available") {
    const char* dir = std::getenv("RESID_SCOPE_CHECKPOINT_DIR");
    if (dir == nullptr) {
        MESSAGE("RESID_SCOPE_CHECKPOINT_DIR not set; skipping real-checkpoint header check");
        return;
    }
    const auto path = std::filesystem::path(dir) / "model.safetensors";
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    char lenb[8];
    in.read(lenb, 8);
    uint64_t len = 0;
    for (int i = 7; i >= 0; --i) len = (len << 8) | static_cast<unsigned char>(lenb[i]);
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    const auto header = json::parse(text);
    const auto shape = header.at("model.embed_tokens.weight").at("shape");
    CHECK(shape[1].get<int>() == 2048);
    int layers = 0;
    while (header.contains("model.layers." + std::to_string(layers) +
                           ".self_attn.q_proj.weight")) {
        ++layers;
    }
    CHECK(layers == 16);
}

TEST_CASE("dataset JSONL round trip preserves instances in order") {
    const auto cfg = fixtures::tiny_config(1, 4, 1, 1, 8, 64);
    const auto instances = synthetic_instances(cfg, 4, 9);
    const auto path = temp_path("data.jsonl");
    save_dataset(instances, path.string());
    const auto back = load_dataset(path.string());
    REQUIRE(back.size() == 4);
    for (size_t i = 0; i < back.size(); ++i) {
        CHECK(back[i].id == instances[i].id);
        CHECK(back[i].s_a.ids == instances[i].s_a.ids);
        CHECK(back[i].s_a.text == instances[i].s_a.text);
        CHECK(back[i].s_f.span_begin == instances[i].s_f.span_begin);
        CHECK(back[i].c_f == instances[i].c_f);
        CHECK(back[i].c_l == instances[i].c_l);
    }
    // idempotent: loading twice gives the same result
    const auto again = load_dataset(path.string());
    CHECK(again.size() == back.size());
    CHECK(again[2].s_l.ids == back[2].s_l.ids);
    std::filesystem::remove(path);
}

TEST_CASE("a well-formed single line yields one instance") {
    const auto cfg = fixtures::tiny_config(1, 4, 1, 1, 8, 64);
    const auto one = synthetic_instances(cfg, 1, 3);
    const auto path = temp_path("single.jsonl");
    write_file(path, instance_to_json_text(one[0]) + "\n");
    const auto back = load_dataset(path.string());
    REQUIRE(back.size() == 1);
    CHECK(back[0].idiom == one[0].idiom);
    std::filesystem::remove(path);
}

TEST_CASE("candidate overlap is rejected with the offending token") {
    const auto cfg = fixtures::tiny_config(1, 4, 1, 1, 8, 64);
    auto inst = synthetic_instances(cfg, 1, 3)[0];
    auto j = json::parse(instance_to_json_text(inst));
    std::vector<int> c_f, c_l;
    for (int v = 0; v < 19; ++v) c_f.push_back(v);
    for (int v = 20; v < 39; ++v) c_l.push_back(v);
    c_f.push_back(42);
    c_l.push_back(42);
    j["C_f"] = c_f;
    j["C_l"] = c_l;
    const auto path = temp_path("overlap.jsonl");
    write_file(path, j.dump() + "\n");
    CHECK_THROWS_WITH_AS(load_dataset(path.string()), doctest::Contains("candidate overlap"),
                         ValidationError);
    CHECK_THROWS_WITH_AS(load_dataset(path.string()), doctest::Contains("42"),
                         ValidationError);
    std::filesystem::remove(path);
}

TEST_CASE("dataset errors carry the line number") {
    const auto cfg = fixtures::tiny_config(1, 4, 1, 1, 8, 64);
    const auto one = synthetic_instances(cfg, 1, 3)[0];
    const auto path = temp_path("line2.jsonl");
    write_file(path, instance_to_json_text(one) + "\n{\"bad\": true}\n");
    CHECK_THROWS_WITH_AS(load_dataset(path.string()), doctest::Contains(":2"),
                         ValidationError);
    std::filesystem::remove(path);

    SUBCASE("bad span") {
        auto j = json::parse(instance_to_json_text(one));
        j["s_a"]["span"] = {5, 99};
        const auto p2 = temp_path("span.jsonl");
        write_file(p2, j.dump() + "\n");
        CHECK_THROWS_AS(load_dataset(p2.string()), ValidationError);
        std::filesystem::remove(p2);
    }
    SUBCASE("wrong candidate count") {
        auto j = json::parse(instance_to_json_text(one));
        auto c_f = j.at("C_f").get<std::vector<int>>();
        c_f.pop_back();
        j["C_f"] = c_f;
        const auto p2 = temp_path("count.jsonl");
        write_file(p2, j.dump() + "\n");
        CHECK_THROWS_WITH_AS(load_dataset(p2.string()), doctest::Contains("20"),
                             ValidationError);
        std::filesystem::remove(p2);
    }
}

TEST_CASE("embedding sidecar round trip and validation") {
    EmbeddingTable table;
    table.insert("a", EmbeddingTable::kFigurative, {1.0f, 2.0f});
    table.insert("a", EmbeddingTable::kLiteral, {3.0f, 4.0f});
    table.insert("b", EmbeddingTable::kFigurative, {-1.0f, 0.5f});
    CHECK(table.size() == 3);
    CHECK(table.width() == 2);
    CHECK(table.contains("a", EmbeddingTable::kLiteral));
    CHECK_FALSE(table.contains("b", EmbeddingTable::kLiteral));
    CHECK(table.at("a", EmbeddingTable::kFigurative)[1] == 2.0f);
    CHECK_THROWS_AS(table.at("zzz", EmbeddingTable::kFigurative), ValidationError);

    const auto path = temp_path("emb.jsonl");
    table.save(path.string());
    const auto back = EmbeddingTable::load(path.string());
    CHECK(back.size() == 3);
    CHECK(back.at("b", EmbeddingTable::kFigurative) ==
          std::vector<float>{-1.0f, 0.5f});
    std::filesystem::remove(path);

    SUBCASE("width mismatch rejected") {
        CHECK_THROWS_AS(table.insert("c", EmbeddingTable::kFigurative, {1.0f}),
                        ValidationError);
    }
    SUBCASE("non-finite entries rejected") {
        CHECK_THROWS_AS(
            table.insert("c", EmbeddingTable::kFigurative, {1.0f, NAN}),
            ValidationError);
    }
    SUBCASE("duplicate keys rejected") {
        CHECK_THROWS_AS(table.insert("a", EmbeddingTable::kFigurative, {9.0f, 9.0f}),
                        ValidationError);
    }
}

TEST_CASE("sweep serialization") {
    SweepResult toy;
    toy.axis = SweepAxis::layer;
    toy.cells.resize(2);
    toy.cells[0].layer = 0;
    toy.cells[0].n = 3;
    toy.cells[0].significant = true;
    toy.cells[0].metrics = {{"delta_f", -0.25, -0.5, 0.11}, {"delta_l", 0.125, 0.1, 0.2}};
    toy.cells[1].layer = 1;
    toy.cells[1].n = 3;
    toy.cells[1].metrics = {{"delta_f", 1.0 / 3.0, 0.2, 0.6},
                            {"delta_l", -0.7071067811865476, -1.0, 0.0}};
    toy.validate();

    SUBCASE("empty sweep writes a header-only CSV") {
        SweepResult empty;
        empty.axis = SweepAxis::layer;
        CHECK(sweep_to_csv(empty) == "layer,metric,mean,ci_lo,ci_hi,significant,n\n");
    }
    SUBCASE("CSV rows mirror the in-memory cells") {
        const auto csv = sweep_to_csv(toy);
        CHECK(csv.find("0,delta_f,-0.25,-0.5,0.11,true,3") != std::string::npos);
        const auto back = sweep_from_csv(csv);
        REQUIRE(back.cells.size() == 2);
        CHECK(back.cells[0].metrics[0].mean == -0.25);
        CHECK(back.cells[1].metrics[1].mean == toy.cells[1].metrics[1].mean);
        CHECK(back.cells[0].significant);
        CHECK_FALSE(back.cells[1].significant);
    }
    SUBCASE("JSON -> CSV -> JSON keeps every numeric field to full precision") {
        const auto j1 = sweep_to_json(toy);
        const auto from_json = sweep_from_json(j1);
        const auto csv = sweep_to_csv(from_json);
        const auto from_csv = sweep_from_csv(csv);
        const auto j2 = sweep_to_json(from_csv);
        CHECK(j1 == j2);
    }
    SUBCASE("head-axis cells include the head column") {
        SweepResult heads;
        heads.axis = SweepAxis::layer_head;
        heads.cells.resize(1);
        heads.cells[0].layer = 1;
        heads.cells[0].head = 3;
        heads.cells[0].n = 2;
        heads.cells[0].metrics = {{"delta_f", 0.5, 0.5, 0.5}};
        heads.validate();
        const auto csv = sweep_to_csv(heads);
        CHECK(csv.find("layer,head,metric") == 0);
        CHECK(csv.find("1,3,delta_f,0.5,0.5,0.5,false,2") != std::string::npos);
        const auto back = sweep_from_csv(csv);
        CHECK(back.axis == SweepAxis::layer_head);
        CHECK(back.cells[0].head == 3);
    }
    SUBCASE("SVG output draws one polyline per metric and a zero line") {
        const auto svg = sweep_to_svg(toy);
        CHECK(svg.find("<svg") != std::string::npos);
        CHECK(svg.rfind("</svg>") != std::string::npos);
        CHECK(std::count(svg.begin(), svg.end(), '\n') > 4);
        size_t polylines = 0;
        for (size_t pos = svg.find("<polyline"); pos != std::string::npos;
             pos = svg.find("<polyline", pos + 1)) {
            ++polylines;
        }
        CHECK(polylines == 2);
        CHECK(svg.find("stroke-dasharray") != std::string::npos);  // the zero reference line
        CHECK(svg.find("delta_f") != std::string::npos);
        CHECK(svg.find("delta_l") != std::string::npos);
    }
    SUBCASE("file-level write/read round trip in both formats") {
        for (const char* fmt : {"csv", "json"}) {
            const auto path = temp_path(std::string("sweep.") + fmt);
            write_sweep(toy, path.string(), fmt);
            const auto back = read_sweep(path.string(), fmt);
            CHECK(back.cells.size() == 2);
            CHECK(back.cells[1].metrics[1].mean == toy.cells[1].metrics[1].mean);
            std::filesystem::remove(path);
        }
    }
    SUBCASE("validation rejects inconsistent cells") {
        SweepResult bad = toy;
        bad.cells[0].n = 0;
        CHECK_THROWS_AS(bad.validate(), ValidationError);
        bad = toy;
        bad.cells[0].metrics[0].lo = 0.5;  // lo > mean
        CHECK_THROWS_AS(bad.validate(), ValidationError);
        bad = toy;
        bad.cells[0].head = 2;  // head set on a layer-axis sweep
        CHECK_THROWS_AS(bad.validate(), ValidationError);
    }
    SUBCASE("unknown format and unwritable path are errors") {
        CHECK_THROWS_AS(write_sweep(toy, "/nonexistent/dir/x.csv", "csv"), IoError);
        CHECK_THROWS_AS(write_sweep(toy, temp_path("x.bin").string(), "parquet"),
                        ValidationError);
    }
}
