#include <gtest/gtest.h>

#include "calm/prompts.hpp"

using namespace calm;

// The shipped prompt files are the editable copies of the built-in
// defaults; they must not drift apart.
TEST(Prompts, FilesMatchBuiltInDefaults) {
    std::string dir = std::string(CALM_SOURCE_DIR) + "/prompts/";
    EXPECT_EQ(load_template(dir + "reasoner.md", {"problem"}), kDefaultReasonerTemplate);
    EXPECT_EQ(load_template(dir + "intervener.md", {"problem", "transcript"}), kDefaultIntervenerTemplate);
    EXPECT_EQ(load_template(dir + "quantification.md", {"problem", "transcript"}),
              kDefaultQuantificationTemplate);
}

TEST(Prompts, SubstitutionIsSinglePass) {
    EXPECT_EQ(instantiate("{a} and {b}", {{"a", "{b}"}, {"b", "B"}}), "{b} and B");
    EXPECT_EQ(instantiate("{missing} {a", {{"a", "x"}}), "{missing} {a");
}
