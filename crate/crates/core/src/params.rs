//! Named traversal of parameter structures.
//!
//! Parameter structs are generic over their leaf type so the same layout
//! carries concrete tensors, tape variables during a forward pass, and
//! gradients afterwards. `map` and `for_each_mut` always walk fields in the
//! same order, which is also the order used by checkpoints and the optimizer.

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub trait ParamTree<T> {
    type Mapped<U>;

    fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Self::Mapped<U>;

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T));

    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
        let _ = self.map(prefix, &mut |name, t| f(name, t));
    }

    fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.for_each("", &mut |name, _| out.push(name.to_string()));
        out
    }
}

impl<T, P: ParamTree<T>> ParamTree<T> for Option<P> {
    type Mapped<U> = Option<P::Mapped<U>>;

    fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Self::Mapped<U> {
        self.as_ref().map(|p| p.map(prefix, f))
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        if let Some(p) = self {
            p.for_each_mut(prefix, f);
        }
    }
}

impl<T, P: ParamTree<T>> ParamTree<T> for Vec<P> {
    type Mapped<U> = Vec<P::Mapped<U>>;

    fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Self::Mapped<U> {
        self.iter()
            .enumerate()
            .map(|(k, p)| p.map(&join(prefix, &k.to_string()), f))
            .collect()
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        for (k, p) in self.iter_mut().enumerate() {
            p.for_each_mut(&join(prefix, &k.to_string()), f);
        }
    }
}

/// Implements [`ParamTree`] for a struct whose listed fields are leaves of
/// type `T` and whose remaining fields are `Clone` metadata.
#[macro_export]
macro_rules! param_tree {
    ($ty:ident { leaves: [$($leaf:ident),* $(,)?] $(, meta: [$($meta:ident),* $(,)?])? $(,)? }) => {
        impl<T> $crate::params::ParamTree<T> for $ty<T> {
            type Mapped<U> = $ty<U>;

            fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> $ty<U> {
                $ty {
                    $($leaf: f(&$crate::params::join(prefix, stringify!($leaf)), &self.$leaf),)*
                    $($($meta: self.$meta.clone(),)*)?
                }
            }

            fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
                $(f(&$crate::params::join(prefix, stringify!($leaf)), &mut self.$leaf);)*
            }
        }
    };
}
