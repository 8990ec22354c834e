#include <gtest/gtest.h>

#include "commands.hpp"
#include "vsearch/vsearch.hpp"

TEST(Headers, UmbrellaCompiles) { EXPECT_EQ(vsearch::kDescriptorDim, 576u); }
