#pragma once

#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "residscope/errors.hpp"

namespace residscope {

// Byte-level BPE tokenizer. Loads either a published tokenizer.json
// (model.vocab / model.merges) or a flat {"vocab": ..., "merges": ...} file.
// Vocabulary entries are byte-level strings under the usual printable-byte
// remapping; every single byte must have a token so that any UTF-8 input
// round-trips: decode(encode(s)) == s.
class Tokenizer {
  public:
    static Tokenizer load(const std::string& path);
    static Tokenizer from_json_text(const std::string& text);

    std::vector<int> encode(const std::string& text) const;
    std::string decode(const std::vector<int>& ids) const;

    int vocab_size() const { return static_cast<int>(id_to_token_.size()); }
    int bos_id() const { return bos_id_; }  // -1 when the file declares none

  private:
    std::unordered_map<std::string, int> token_to_id_;
    std::vector<std::string> id_to_token_;
    std::map<std::pair<std::string, std::string>, int> merge_rank_;
    int bos_id_ = -1;

    std::vector<int> encode_chunk(const std::string& chunk_bytes) const;
};

}  // namespace residscope
