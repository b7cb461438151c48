// Copyright 2026 The changedet Authors
// SPDX-License-Identifier: Apache-2.0
