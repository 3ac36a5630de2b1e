#include "residscope/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace residscope {

using nlohmann::json;

namespace {

// GPT-2 style byte <-> printable-unicode remapping. Printable latin-1 bytes
// map to themselves; the rest shift into the 256+ range so every byte has a
// visible, single-codepoint representation inside vocab strings.
const std::vector<int>& byte_to_cp_table() {
    static const std::vector<int> table = [] {
        std::vector<int> t(256, -1);
        int n = 0;
        auto keep = [&](int lo, int hi) {
            for (int b = lo; b <= hi; ++b) t[b] = b;
        };
        keep(33, 126);    // '!'..'~'
        keep(161, 172);   // latin-1 printables
        keep(174, 255);
        for (int b = 0; b < 256; ++b) {
            if (t[b] == -1) t[b] = 256 + n++;
        }
        return t;
    }();
    return table;
}

std::string cp_to_utf8(int cp) {
    std::string out;
    if (cp < 0x80) {
        out += static_cast<char>(cp);
    } else if (cp < 0x800) {
        out += static_cast<char>(0xc0 | (cp >> 6));
        out += static_cast<char>(0x80 | (cp & 0x3f));
    } else {
        out += static_cast<char>(0xe0 | (cp >> 12));
        out += static_cast<char>(0x80 | ((cp >> 6) & 0x3f));
        out += static_cast<char>(0x80 | (cp & 0x3f));
    }
    return out;
}

// Decodes one UTF-8 codepoint; advances i. Invalid sequences yield the byte
// value itself (callers only feed vocab strings, which are well-formed).
int next_cp(const std::string& s, size_t& i) {
    const unsigned char c = static_cast<unsigned char>(s[i]);
    if (c < 0x80) {
        i += 1;
        return c;
    }
    if ((c >> 5) == 0x6 && i + 1 < s.size()) {
        const int cp = ((c & 0x1f) << 6) | (static_cast<unsigned char>(s[i + 1]) & 0x3f);
        i += 2;
        return cp;
    }
    if ((c >> 4) == 0xe && i + 2 < s.size()) {
        const int cp = ((c & 0x0f) << 12) |
                       ((static_cast<unsigned char>(s[i + 1]) & 0x3f) << 6) |
                       (static_cast<unsigned char>(s[i + 2]) & 0x3f);
        i += 3;
        return cp;
    }
    if ((c >> 3) == 0x1e && i + 3 < s.size()) {
        const int cp = ((c & 0x07) << 18) |
                       ((static_cast<unsigned char>(s[i + 1]) & 0x3f) << 12) |
                       ((static_cast<unsigned char>(s[i + 2]) & 0x3f) << 6) |
                       (static_cast<unsigned char>(s[i + 3]) & 0x3f);
        i += 4;
        return cp;
    }
    i += 1;
    return c;
}

std::string bytes_to_symbols(const std::string& bytes) {
    const auto& table = byte_to_cp_table();
    std::string out;
    out.reserve(bytes.size() * 2);
    for (unsigned char b : bytes) out += cp_to_utf8(table[b]);
    return out;
}

std::string symbols_to_bytes(const std::string& symbols) {
    static const std::vector<int> inverse = [] {
        std::vector<int> inv(512, -1);
        const auto& table = byte_to_cp_table();
        for (int b = 0; b < 256; ++b) inv[table[b]] = b;
        return inv;
    }();
    std::string out;
    size_t i = 0;
    while (i < symbols.size()) {
        const int cp = next_cp(symbols, i);
        if (cp < 0 || cp >= 512 || inverse[cp] < 0) {
            throw ValidationError("tokenizer: vocab string contains a non-byte codepoint");
        }
        out += static_cast<char>(inverse[cp]);
    }
    return out;
}

bool is_ascii_letter(unsigned char c) {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z');
}
bool is_ascii_digit(unsigned char c) { return c >= '0' && c <= '9'; }
bool is_space(unsigned char c) { return c == ' ' || c == '\t'; }
bool is_newline(unsigned char c) { return c == '\n' || c == '\r'; }
// Multi-byte UTF-8 lead/continuation bytes group with letters, which keeps
// words in non-Latin scripts as single chunks.
bool is_wordish(unsigned char c) { return is_ascii_letter(c) || c >= 0x80; }

// Splits raw bytes into merge-local chunks: a word with an optional single
// leading space, short digit runs, punctuation runs with an optional leading
// space, newline runs, and residual whitespace. Chunks exactly partition the
// input, so round-tripping never depends on the split.
std::vector<std::string> pre_tokenize(const std::string& text) {
    std::vector<std::string> chunks;
    size_t i = 0;
    const size_t n = text.size();
    while (i < n) {
        size_t start = i;
        unsigned char c = static_cast<unsigned char>(text[i]);
        // optional single space glued to the following word/punct chunk
        size_t body = i;
        if (c == ' ' && i + 1 < n && !is_space(static_cast<unsigned char>(text[i + 1])) &&
            !is_newline(static_cast<unsigned char>(text[i + 1]))) {
            body = i + 1;
            c = static_cast<unsigned char>(text[body]);
        }
        if (is_wordish(c)) {
            size_t j = body;
            while (j < n && is_wordish(static_cast<unsigned char>(text[j]))) ++j;
            chunks.push_back(text.substr(start, j - start));
            i = j;
        } else if (is_ascii_digit(c)) {
            size_t j = body;
            while (j < n && j - body < 3 && is_ascii_digit(static_cast<unsigned char>(text[j])))
                ++j;
            chunks.push_back(text.substr(start, j - start));
            i = j;
        } else if (is_newline(c)) {
            size_t j = i;
            while (j < n && is_newline(static_cast<unsigned char>(text[j]))) ++j;
            chunks.push_back(text.substr(start, j - start));
            i = j;
        } else if (is_space(c)) {
            size_t j = i;
            while (j < n && is_space(static_cast<unsigned char>(text[j]))) ++j;
            chunks.push_back(text.substr(start, j - start));
            i = j;
        } else {
            // punctuation / other single-byte symbols
            size_t j = body;
            while (j < n) {
                unsigned char pc = static_cast<unsigned char>(text[j]);
                if (is_wordish(pc) || is_ascii_digit(pc) || is_space(pc) || is_newline(pc)) break;
                ++j;
            }
            chunks.push_back(text.substr(start, j - start));
            i = j;
        }
    }
    return chunks;
}

}  // namespace

Tokenizer Tokenizer::from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw IoError(std::string("tokenizer: bad JSON: ") + e.what());
    }
    const json* vocab = nullptr;
    const json* merges = nullptr;
    if (j.contains("model") && j["model"].contains("vocab")) {
        vocab = &j["model"]["vocab"];
        if (j["model"].contains("merges")) merges = &j["model"]["merges"];
    } else if (j.contains("vocab")) {
        vocab = &j["vocab"];
        if (j.contains("merges")) merges = &j["merges"];
    }
    if (vocab == nullptr) throw IoError("tokenizer: no vocab found in file");

    Tokenizer t;
    int max_id = -1;
    for (auto it = vocab->begin(); it != vocab->end(); ++it) {
        max_id = std::max(max_id, it.value().get<int>());
    }
    t.id_to_token_.assign(max_id + 1, "");
    for (auto it = vocab->begin(); it != vocab->end(); ++it) {
        const int id = it.value().get<int>();
        if (id < 0) throw IoError("tokenizer: negative token id for " + it.key());
        t.token_to_id_[it.key()] = id;
        t.id_to_token_[id] = it.key();
    }
    if (merges != nullptr) {
        int rank = 0;
        for (const auto& m : *merges) {
            std::string left, right;
            if (m.is_string()) {
                const std::string s = m.get<std::string>();
                const auto sp = s.find(' ');
                if (sp == std::string::npos || sp == 0 || sp + 1 >= s.size() ||
                    s.find(' ', sp + 1) != std::string::npos) {
                    throw IoError("tokenizer: malformed merge entry '" + s + "'");
                }
                left = s.substr(0, sp);
                right = s.substr(sp + 1);
            } else if (m.is_array() && m.size() == 2) {
                left = m[0].get<std::string>();
                right = m[1].get<std::string>();
            } else {
                throw IoError("tokenizer: malformed merge entry at rank " + std::to_string(rank));
            }
            t.merge_rank_.emplace(std::make_pair(left, right), rank++);
        }
    }
    // added/special tokens may carry the bos id
    if (j.contains("bos_token_id")) t.bos_id_ = j["bos_token_id"].get<int>();

    // round-trip requires a token for every single byte symbol
    const auto& table = byte_to_cp_table();
    for (int b = 0; b < 256; ++b) {
        if (!t.token_to_id_.count(cp_to_utf8(table[b]))) {
            throw IoError("tokenizer: vocab is missing the single-byte token for byte " +
                          std::to_string(b));
        }
    }
    return t;
}

Tokenizer Tokenizer::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("tokenizer: cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return from_json_text(ss.str());
}

std::vector<int> Tokenizer::encode_chunk(const std::string& chunk_bytes) const {
    // split into single-byte symbols, then greedily apply the lowest-ranked
    // adjacent merge until none applies
    std::vector<std::string> parts;
    const auto& table = byte_to_cp_table();
    parts.reserve(chunk_bytes.size());
    for (unsigned char b : chunk_bytes) parts.push_back(cp_to_utf8(table[b]));

    while (parts.size() > 1) {
        int best_rank = -1;
        size_t best_at = 0;
        for (size_t i = 0; i + 1 < parts.size(); ++i) {
            auto it = merge_rank_.find({parts[i], parts[i + 1]});
            if (it != merge_rank_.end() && (best_rank < 0 || it->second < best_rank)) {
                best_rank = it->second;
                best_at = i;
            }
        }
        if (best_rank < 0) break;
        const std::string left = parts[best_at];
        const std::string right = parts[best_at + 1];
        // merge every occurrence of this pair, left to right
        std::vector<std::string> next;
        next.reserve(parts.size());
        for (size_t i = 0; i < parts.size();) {
            if (i + 1 < parts.size() && parts[i] == left && parts[i + 1] == right) {
                next.push_back(left + right);
                i += 2;
            } else {
                next.push_back(parts[i]);
                i += 1;
            }
        }
        parts = std::move(next);
    }

    std::vector<int> ids;
    ids.reserve(parts.size());
    for (const auto& p : parts) {
        auto it = token_to_id_.find(p);
        if (it == token_to_id_.end()) {
            // merge produced a symbol the vocab lacks; fall back to bytes
            for (size_t i = 0, step = 0; i < p.size(); i += step) {
                step = 0;
                size_t j = i;
                next_cp(p, j);
                step = j - i;
                auto bit = token_to_id_.find(p.substr(i, step));
                if (bit == token_to_id_.end()) {
                    throw ValidationError("tokenizer: irreducible symbol not in vocab");
                }
                ids.push_back(bit->second);
            }
        } else {
            ids.push_back(it->second);
        }
    }
    return ids;
}

std::vector<int> Tokenizer::encode(const std::string& text) const {
    std::vector<int> ids;
    for (const auto& chunk : pre_tokenize(text)) {
        auto part = encode_chunk(chunk);
        ids.insert(ids.end(), part.begin(), part.end());
    }
    return ids;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
    std::string symbols;
    for (int id : ids) {
        if (id < 0 || id >= vocab_size() || id_to_token_[id].empty()) {
            throw ValidationError("tokenizer: unknown token id " + std::to_string(id));
        }
        symbols += id_to_token_[id];
    }
    return symbols_to_bytes(symbols);
}

}  // namespace residscope
