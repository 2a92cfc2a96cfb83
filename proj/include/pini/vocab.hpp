#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace pini {

// Fixed 64-word vocabulary: pad and unknown markers, template words, the ten
// digits, and the ten class-name tokens used by the synthetic corpora.
class Vocabulary {
 public:
  static const Vocabulary& standard();

  std::size_t size() const { return words_.size(); }
  bool contains(const std::string& word) const { return index_.count(word) > 0; }
  int id(const std::string& word) const;
  const std::string& word(int id) const;
  int pad_id() const { return 0; }
  int unk_id() const { return 1; }
  const std::vector<std::string>& class_names() const { return class_names_; }

  static constexpr std::size_t kSize = 64;

 private:
  Vocabulary();
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
  std::vector<std::string> class_names_;
};

// Splits the template on spaces, substitutes the trailing "[class]" slot and
// right-pads to `length`. The class token always ends up last before padding.
std::vector<int> tokenize(const Vocabulary& vocab, const std::string& prompt_template,
                          const std::string& class_name, std::size_t length);

struct PromptSet {
  std::vector<std::vector<int>> tokens;  // one sequence per class, each of equal length
  std::vector<std::size_t> class_positions;
  std::string prompt_template;

  std::size_t num_classes() const { return tokens.size(); }
  std::size_t length() const { return tokens.empty() ? 0 : tokens[0].size(); }

  static PromptSet from_template(const Vocabulary& vocab, const std::string& prompt_template,
                                 const std::vector<std::string>& class_names, std::size_t length);
};

}  // namespace pini
