// Copyright 2026 The changedet Authors
// SPDX-License-Identifier: Apache-2.0

int main(int, char**) { return 0; }
