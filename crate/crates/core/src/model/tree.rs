//! Parameter containers generic over their leaf type.
//!
//! The same structs hold stored arrays (`DArray`) and the graph handles
//! (`Var`) those arrays are bound to for one forward pass; [`Tree::map`]
//! converts between the two and [`Tree::visit`] fixes a stable naming and
//! ordering of leaves.

pub trait Tree<T> {
    type Mapped<U>;

    fn map<U, F: FnMut(&T) -> U>(&self, f: &mut F) -> Self::Mapped<U>;

    fn visit<'a, F: FnMut(&str, &'a T)>(&'a self, path: &str, f: &mut F);

    fn visit_mut<'a, F: FnMut(&str, &'a mut T)>(&'a mut self, path: &str, f: &mut F);
}

pub(crate) fn join(path: &str, name: &str) -> String {
    if path.is_empty() {
        name.to_string()
    } else {
        format!("{path}.{name}")
    }
}

impl<T, X: Tree<T>> Tree<T> for Vec<X> {
    type Mapped<U> = Vec<X::Mapped<U>>;

    fn map<U, F: FnMut(&T) -> U>(&self, f: &mut F) -> Self::Mapped<U> {
        self.iter().map(|x| x.map(f)).collect()
    }

    fn visit<'a, F: FnMut(&str, &'a T)>(&'a self, path: &str, f: &mut F) {
        for (i, x) in self.iter().enumerate() {
            x.visit(&join(path, &i.to_string()), f);
        }
    }

    fn visit_mut<'a, F: FnMut(&str, &'a mut T)>(&'a mut self, path: &str, f: &mut F) {
        for (i, x) in self.iter_mut().enumerate() {
            x.visit_mut(&join(path, &i.to_string()), f);
        }
    }
}

/// Implements [`Tree`] for a struct whose fields are either bare leaves
/// (`T`) or nested trees.
macro_rules! param_tree {
    ($name:ident { leaves: [$($leaf:ident),*], trees: [$($sub:ident),*] }) => {
        impl<T> $crate::model::tree::Tree<T> for $name<T> {
            type Mapped<U> = $name<U>;

            fn map<U, F: FnMut(&T) -> U>(&self, f: &mut F) -> $name<U> {
                $name {
                    $($leaf: f(&self.$leaf),)*
                    $($sub: self.$sub.map(f),)*
                }
            }

            fn visit<'a, F: FnMut(&str, &'a T)>(&'a self, path: &str, f: &mut F) {
                $(f(&$crate::model::tree::join(path, stringify!($leaf)), &self.$leaf);)*
                $(self.$sub.visit(&$crate::model::tree::join(path, stringify!($sub)), f);)*
            }

            fn visit_mut<'a, F: FnMut(&str, &'a mut T)>(&'a mut self, path: &str, f: &mut F) {
                $(f(&$crate::model::tree::join(path, stringify!($leaf)), &mut self.$leaf);)*
                $(self.$sub.visit_mut(&$crate::model::tree::join(path, stringify!($sub)), f);)*
            }
        }
    };
}

pub(crate) use param_tree;
