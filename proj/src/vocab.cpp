#include "pini/vocab.hpp"

#include <sstream>
#include <stdexcept>

namespace pini {

Vocabulary::Vocabulary() {
  words_ = {
      "<pad>", "<unk>",
      // template and filler words
      "a", "an", "the", "this", "that", "photo", "photos", "picture", "pictures", "pic",
      "image", "shot", "snap", "of", "in", "on", "at", "to", "with", "for", "and", "or",
      "is", "type", "types", "kind", "style", "pattern", "texture", "small", "large",
      "bright", "dark", "new", "old", "fine", "blurry", "clear", "doing", "do", "does", "my",
      // digits
      "0", "1", "2", "3", "4", "5", "6", "7", "8", "9",
      // class names
      "bars", "dots", "grid", "rings", "cross", "waves", "slash", "blobs", "checks", "spots",
  };
  if (words_.size() != kSize) throw std::logic_error("Vocabulary: expected 64 words");
  for (std::size_t i = 0; i < words_.size(); ++i) {
    index_[words_[i]] = static_cast<int>(i);
  }
  class_names_.assign(words_.end() - 10, words_.end());
}

const Vocabulary& Vocabulary::standard() {
  static const Vocabulary vocab;
  return vocab;
}

int Vocabulary::id(const std::string& word) const {
  auto it = index_.find(word);
  if (it == index_.end()) throw std::invalid_argument("Vocabulary: unknown word '" + word + "'");
  return it->second;
}

const std::string& Vocabulary::word(int id) const {
  if (id < 0 || id >= static_cast<int>(words_.size())) {
    throw std::invalid_argument("Vocabulary: id out of range");
  }
  return words_[static_cast<std::size_t>(id)];
}

std::vector<int> tokenize(const Vocabulary& vocab, const std::string& prompt_template,
                          const std::string& class_name, std::size_t length) {
  std::vector<std::string> words;
  std::istringstream iss(prompt_template);
  std::string w;
  while (iss >> w) words.push_back(w);

  if (words.empty() || words.back() != "[class]") {
    throw std::invalid_argument("tokenize: template must end with a [class] slot");
  }
  for (std::size_t i = 0; i + 1 < words.size(); ++i) {
    if (words[i] == "[class]") {
      throw std::invalid_argument("tokenize: [class] slot must be the final word");
    }
  }
  if (words.size() > length) throw std::invalid_argument("tokenize: template longer than prompt");

  std::vector<int> ids;
  ids.reserve(length);
  for (std::size_t i = 0; i + 1 < words.size(); ++i) ids.push_back(vocab.id(words[i]));
  ids.push_back(vocab.id(class_name));
  while (ids.size() < length) ids.push_back(vocab.pad_id());
  return ids;
}

PromptSet PromptSet::from_template(const Vocabulary& vocab, const std::string& prompt_template,
                                   const std::vector<std::string>& class_names,
                                   std::size_t length) {
  if (class_names.empty()) throw std::invalid_argument("PromptSet: no classes");
  PromptSet out;
  out.prompt_template = prompt_template;
  for (const auto& name : class_names) {
    std::vector<int> ids = tokenize(vocab, prompt_template, name, length);
    std::size_t class_pos = ids.size();
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] != vocab.pad_id()) class_pos = i;  // last non-pad slot holds the class token
    }
    out.tokens.push_back(std::move(ids));
    out.class_positions.push_back(class_pos);
  }
  return out;
}

}  // namespace pini
